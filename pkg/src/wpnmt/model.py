"""Attention-based GRU encoder-decoder.

All functions work on batched tensors: token ids ``[B, T]``, states ``[B, d]``.
Decoding code passes ``B = 1`` for the source side and lets the beam broadcast.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .numerics import Tensor

MAGIC = b"NMTWP1\0"


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    dim_emb: int = 512
    dim_hid: int = 1024
    dim_att: Optional[int] = None
    dim_readout: Optional[int] = None

    def __post_init__(self):
        if self.dim_att is None:
            self.dim_att = self.dim_hid
        if self.dim_readout is None:
            self.dim_readout = self.dim_emb


class ModelParams:
    """Named parameter tensors; names are stable dotted checkpoint paths."""

    def __init__(self, tensors: dict[str, Tensor], config: ModelConfig):
        self.tensors = dict(tensors)
        self.config = config
        self._groups: dict[str, dict[str, Tensor]] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return self["decoder.W_f"].dtype

    @property
    def has_wpe(self) -> bool:
        return "wpe.W_f" in self.tensors

    @property
    def has_wpd(self) -> bool:
        return "wpd.W_p" in self.tensors

    def group(self, prefix: str) -> dict[str, Tensor]:
        g = self._groups.get(prefix)
        if g is None:
            p = prefix + "."
            g = {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}
            self._groups[prefix] = g
        return g

    def update(self, tensors: dict[str, Tensor]) -> None:
        self.tensors.update(tensors)
        self._groups.clear()

    def set_requires_grad(self, flag: bool = True) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), name=k) for k, v in self.tensors.items()},
                           self.config)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.astype(dtype), name=k) for k, v in self.tensors.items()},
                           self.config)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


# ---------------------------------------------------------------------------
# initialisation


def orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _gauss(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


def _gru_tensors(prefix, d_in, d_hid, rng, std):
    out = {}
    for weight, bias in (("W_z", "b_z"), ("W_r", "b_r"), ("W", "b")):
        w = np.empty((d_hid, d_in + d_hid))
        w[:, :d_in] = _gauss(rng, (d_hid, d_in), std)
        w[:, d_in:] = orthogonal(d_hid, rng)
        out[f"{prefix}.{weight}"] = w
        out[f"{prefix}.{bias}"] = np.zeros(d_hid)
    return out


def _attention_tensors(prefix, d_query, d_ctx, d_att, rng, std):
    return {
        f"{prefix}.W": _gauss(rng, (d_att, d_query + d_ctx), std),
        f"{prefix}.b": np.zeros(d_att),
        f"{prefix}.v": _gauss(rng, (d_att,), std),
    }


def _finish(arrays, dtype):
    return {k: Tensor(np.asarray(v, dtype=dtype), name=k) for k, v in arrays.items()}


def init_params(config: ModelConfig, rng: np.random.Generator, wpe: bool = False,
                wpd: bool = False, dtype=np.float32, std: float = 0.01) -> ModelParams:
    """Orthogonal recurrent blocks, zero biases, N(0, std) elsewhere."""
    c = config
    de, dh, da, dr = c.dim_emb, c.dim_hid, c.dim_att, c.dim_readout
    a = {"encoder.emb": _gauss(rng, (c.src_vocab_size, de), std)}
    a.update(_gru_tensors("encoder.fwd", de, dh, rng, std))
    a.update(_gru_tensors("encoder.bwd", de, dh, rng, std))
    a["encoder.W_s"] = _gauss(rng, (dh, 2 * dh), std)
    a["encoder.b_s"] = np.zeros(dh)
    a["decoder.emb"] = _gauss(rng, (c.tgt_vocab_size, de), std)
    a.update(_gru_tensors("decoder.gru", de + 2 * dh, dh, rng, std))
    a.update(_attention_tensors("decoder.att", dh, 2 * dh, da, rng, std))
    a["decoder.W_t"] = _gauss(rng, (dr, de + dh + 2 * dh), std)
    a["decoder.b_t"] = np.zeros(dr)
    a["decoder.W_f"] = _gauss(rng, (c.tgt_vocab_size, dr), std)
    a["decoder.b_f"] = np.zeros(c.tgt_vocab_size)
    params = ModelParams(_finish(a, dtype), config)
    if wpe or wpd:
        add_heads(params, rng, wpe=wpe, wpd=wpd, std=std)
    return params


def add_heads(params: ModelParams, rng: np.random.Generator, wpe: bool = True,
              wpd: bool = True, std: float = 0.01) -> ModelParams:
    """Attach freshly initialised word-prediction heads in place."""
    c = params.config
    dh, da, dr = c.dim_hid, c.dim_att, c.dim_readout
    a = {}
    if wpe and not params.has_wpe:
        a.update(_attention_tensors("wpe.att", dh, 2 * dh, da, rng, std))
        a["wpe.W_t"] = _gauss(rng, (dr, dh + 2 * dh), std)
        a["wpe.b_t"] = np.zeros(dr)
        a["wpe.W_f"] = _gauss(rng, (c.tgt_vocab_size, dr), std)
        a["wpe.b_f"] = np.zeros(c.tgt_vocab_size)
    if wpd and not params.has_wpd:
        a["wpd.W_p"] = _gauss(rng, (dr, dr), std)
        a["wpd.b_p"] = np.zeros(dr)
    params.update(_finish(a, params.dtype))
    return params


# ---------------------------------------------------------------------------
# forward pieces


@dataclass
class GRUActivations:
    z: Tensor
    r: Tensor
    h_cand: Tensor


@dataclass
class EncoderOutput:
    h: Tensor  # [B, T, 2*dim_hid]
    s0: Tensor  # [B, dim_hid]
    mask: np.ndarray  # [B, T]
    cache: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.h.shape[1]


@dataclass
class AttentionResult:
    c: Tensor  # [B, 2*dim_hid]
    a: Tensor  # [B, T]
    e: Tensor  # [B, T]


def gru_step(gru: dict[str, Tensor], prev: Tensor, inp: Tensor) -> tuple[Tensor, GRUActivations]:
    d_hid = gru["W_z"].shape[0]
    if prev.shape[-1] != d_hid or inp.shape[-1] + d_hid != gru["W_z"].shape[1]:
        raise nx.DimensionError(
            f"gru_step: state {prev.shape} / input {inp.shape} vs weight {gru['W_z'].shape}")
    xh = nx.concat([inp, prev])
    z = nx.sigmoid(nx.linear(xh, gru["W_z"], gru["b_z"]))
    r = nx.sigmoid(nx.linear(xh, gru["W_r"], gru["b_r"]))
    cand = nx.tanh(nx.linear(nx.concat([inp, nx.mul(r, prev)]), gru["W"], gru["b"]))
    new = nx.add(nx.mul(nx.sub_from_one(z), prev), nx.mul(z, cand))
    return new, GRUActivations(z, r, cand)


def _masked_update(new: Tensor, prev: Tensor, m: np.ndarray) -> Tensor:
    if m.all():
        return new
    return nx.add(nx.mul(new, m), nx.mul(prev, 1 - m))


def encode(params: ModelParams, src, src_mask: Optional[np.ndarray] = None) -> EncoderOutput:
    """Bidirectional GRU encoding and the initial decoder state.

    ``src`` is ``[B, T]`` (or a single id sequence); ``src_mask`` marks real tokens.
    """
    src = np.asarray(src, dtype=np.int64)
    if src.ndim == 1:
        src = src[None, :]
    if src.shape[1] == 0:
        raise ValueError("cannot encode an empty sentence")
    dtype = params.dtype
    mask = np.ones(src.shape, dtype=dtype) if src_mask is None else np.asarray(src_mask, dtype=dtype)
    if (mask.sum(axis=1) == 0).any():
        raise ValueError("cannot encode an empty sentence")
    B, T = src.shape
    dh = params.config.dim_hid
    emb = params["encoder.emb"]
    fwd, bwd = params.group("encoder.fwd"), params.group("encoder.bwd")
    xs = [nx.take_rows(emb, src[:, i]) for i in range(T)]
    cols = [mask[:, i: i + 1] for i in range(T)]

    zero = Tensor(np.zeros((B, dh), dtype=dtype))
    h, fw = zero, []
    for i in range(T):
        new, _ = gru_step(fwd, h, xs[i])
        h = _masked_update(new, h, cols[i])
        fw.append(h)
    h, bw = zero, [None] * T
    for i in reversed(range(T)):
        new, _ = gru_step(bwd, h, xs[i])
        h = _masked_update(new, h, cols[i])
        bw[i] = h
    H = nx.stack([nx.concat([f, b]) for f, b in zip(fw, bw)], axis=1)
    lengths = mask.sum(axis=1, keepdims=True)
    mean = nx.mul(nx.sum_axis(nx.mul(H, mask[:, :, None]), axis=1), 1.0 / lengths)
    s0 = nx.sigmoid(nx.linear(mean, params["encoder.W_s"], params["encoder.b_s"]))
    return EncoderOutput(H, s0, mask)


def attend(scores: Tensor, enc: EncoderOutput) -> AttentionResult:
    """Normalise raw scores over unmasked source positions and mix ``enc.h``."""
    mask = enc.mask
    if (mask.sum(axis=1) == 0).any():
        raise ValueError("attention over a fully masked source")
    e = scores
    if not mask.all():
        e = nx.add(scores, (1 - mask) * nx.NEG_INF)
    a = nx.softmax(e, axis=1)
    B = a.shape[0]
    c = nx.sum_axis(nx.mul(nx.reshape(a, (B, -1, 1)), enc.h), axis=1)
    return AttentionResult(c, a, scores)


def attention(att: dict[str, Tensor], query: Tensor, enc: EncoderOutput,
              key: Optional[str] = None) -> AttentionResult:
    """Additive attention: ``e_i = v . tanh(W [query; h_i] + b)``.

    The source half of ``W`` is applied once per encoder output and cached
    under ``key``.
    """
    W = att["W"]
    dq = query.shape[-1]
    if W.shape[1] != dq + enc.h.shape[-1]:
        raise nx.DimensionError(f"attention: query {query.shape} / context {enc.h.shape} vs W {W.shape}")
    proj = enc.cache.get(key) if key else None
    if proj is None:
        proj = nx.linear(enc.h, nx.getitem(W, (slice(None), slice(dq, None))), att["b"])
        if key:
            enc.cache[key] = proj
    wq = enc.cache.get(key + ".query") if key else None
    if wq is None:
        wq = nx.getitem(W, (slice(None), slice(None, dq)))
        if key:
            enc.cache[key + ".query"] = wq
    q = nx.linear(query, wq)
    B = q.shape[0]
    pre = nx.tanh(nx.add(nx.reshape(q, (B, 1, -1)), proj))
    da = W.shape[0]
    scores = nx.reshape(nx.matmul(pre, nx.reshape(att["v"], (da, 1))), pre.shape[:2])
    return attend(scores, enc)


def decoder_step(params: ModelParams, prev_state: Tensor, prev_emb: Tensor,
                 enc: EncoderOutput) -> tuple[Tensor, AttentionResult]:
    att = attention(params.group("decoder.att"), prev_state, enc, key="decoder.att")
    state, _ = gru_step(params.group("decoder.gru"), prev_state, nx.concat([prev_emb, att.c]))
    return state, att


def readout(params: ModelParams, prev_emb: Tensor, state: Tensor, c: Tensor) -> Tensor:
    """The ``tanh(W_t [emb; s; c])`` layer feeding the output softmax."""
    return nx.tanh(nx.linear(nx.concat([prev_emb, state, c]), params["decoder.W_t"],
                             params["decoder.b_t"]))


def output_logits(params: ModelParams, t: Tensor) -> Tensor:
    return nx.linear(t, params["decoder.W_f"], params["decoder.b_f"])


def output_distribution(params: ModelParams, state: Tensor, prev_emb: Tensor,
                        att: AttentionResult, dropout_mask=None) -> Tensor:
    t = readout(params, prev_emb, state, att.c)
    if dropout_mask is not None:
        t = nx.mul(t, dropout_mask)
    return nx.softmax(output_logits(params, t))


def target_embedding(params: ModelParams, ids) -> Tensor:
    return nx.take_rows(params["decoder.emb"], np.asarray(ids, dtype=np.int64))


@dataclass
class DecoderTrace:
    states: list  # s_1 .. s_L
    contexts: list  # c_1 .. c_L
    attn: list  # a_1 .. a_L
    embs: list  # emb(y_0) .. emb(y_{L-1})
    readouts: list  # t_d at each step


def teacher_forced(params: ModelParams, enc: EncoderOutput, tgt: np.ndarray) -> DecoderTrace:
    """Run the decoder over gold targets ``[B, L]`` with BOS as the first input."""
    from .data import BOS

    tgt = np.asarray(tgt, dtype=np.int64)
    B, L = tgt.shape
    prev_ids = np.concatenate([np.full((B, 1), BOS, dtype=np.int64), tgt[:, :-1]], axis=1)
    state = enc.s0
    trace = DecoderTrace([], [], [], [], [])
    for j in range(L):
        emb = target_embedding(params, prev_ids[:, j])
        state, att = decoder_step(params, state, emb, enc)
        trace.states.append(state)
        trace.contexts.append(att.c)
        trace.attn.append(att.a)
        trace.embs.append(emb)
        trace.readouts.append(readout(params, emb, state, att.c))
    return trace


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(params))


def checkpoint_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    names = params.names()
    for name in names:
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    buf.write(struct.pack("<Q", len(names)))
    return buf.getvalue()


def load_checkpoint(path, dtype=np.float32) -> ModelParams:
    with open(path, "rb") as f:
        data = f.read()
    return parse_checkpoint(data, dtype)


def parse_checkpoint(data: bytes, dtype=np.float32) -> ModelParams:
    if not data.startswith(MAGIC) or len(data) < len(MAGIC) + 8:
        raise ValueError("not a checkpoint file (bad magic)")
    end = len(data) - 8
    (count,) = struct.unpack_from("<Q", data, end)
    pos = len(MAGIC)
    tensors = {}
    while pos < end:
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos: pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        if name in tensors:
            raise ValueError(f"duplicate tensor {name!r} in checkpoint")
        tensors[name] = Tensor(arr.astype(dtype), name=name)
    if pos != end or count != len(tensors):
        raise ValueError("corrupt checkpoint: tensor count mismatch")
    return ModelParams(tensors, config_from_tensors(tensors))


def config_from_tensors(tensors: dict[str, Tensor]) -> ModelConfig:
    src_v, de = tensors["encoder.emb"].shape
    tgt_v = tensors["decoder.emb"].shape[0]
    dh = tensors["encoder.W_s"].shape[0]
    da = tensors["decoder.att.W"].shape[0]
    dr = tensors["decoder.W_t"].shape[0]
    return ModelConfig(src_v, tgt_v, de, dh, da, dr)
