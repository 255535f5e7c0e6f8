"""Training objectives, AdaDelta, dropout and the epoch loop.

Losses are returned negated (negative log-likelihoods) so that every
objective is minimised; a perfect model has loss 0.
"""

from __future__ import annotations

import io
import logging
import math
import os
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .data import Batch, SentencePair, make_batches, pad_batch
from .model import (EncoderOutput, ModelConfig, ModelParams, add_heads, encode, init_params,
                    load_checkpoint, output_logits, save_checkpoint, teacher_forced)
from .numerics import Tape, Tensor
from .word_prediction import bag_counts, remaining_weights, wpd_logits, wpe_logits

log = logging.getLogger(__name__)

OBJECTIVES = ("base", "L1", "L2", "L3")
_HEADS = {"base": (False, False), "L1": (True, False), "L2": (False, True), "L3": (True, True)}


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (``init``, ``shuffle``, ``dropout``...)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass
class LossBreakdown:
    l_t: Tensor
    l_wpe: Optional[Tensor] = None
    l_wpd: Optional[Tensor] = None
    composite: Optional[Tensor] = None

    def values(self) -> dict[str, Optional[float]]:
        def f(t):
            return None if t is None else float(t.data)
        return {"L_T": f(self.l_t), "L_WPE": f(self.l_wpe), "L_WPD": f(self.l_wpd),
                "composite": f(self.composite)}


# ---------------------------------------------------------------------------
# objectives


def _forward(params: ModelParams, batch: Batch, dropout: Optional[np.ndarray] = None):
    enc = encode(params, batch.src, batch.src_mask)
    trace = teacher_forced(params, enc, batch.tgt)
    T = nx.stack(trace.readouts, axis=1)  # [B, L, d_readout]
    return enc, T


def _translation_nll(params: ModelParams, batch: Batch, T: Tensor,
                     dropout: Optional[np.ndarray]) -> Tensor:
    dtype = params.dtype
    mask = batch.tgt_mask.astype(dtype)
    if dropout is not None:
        T = nx.mul(T, dropout.astype(dtype))
    logp = nx.pick(nx.log_softmax(output_logits(params, T)), batch.tgt)  # [B, L]
    weights = mask / mask.sum(axis=1, keepdims=True) / len(batch)
    return nx.scale(nx.sum_all(nx.mul(logp, weights)), -1.0)


def _wpe_nll(params: ModelParams, batch: Batch, enc: EncoderOutput) -> Tensor:
    logp = nx.log_softmax(wpe_logits(params, enc))
    counts = bag_counts(batch.tgt, params.config.tgt_vocab_size, dtype=params.dtype)
    return nx.scale(nx.sum_all(nx.mul(logp, counts)), -1.0 / len(batch))


def _wpd_nll(params: ModelParams, batch: Batch, T: Tensor) -> Tensor:
    logq = nx.log_softmax(wpd_logits(params, T))  # [B, L, V]
    w = remaining_weights(batch.tgt, batch.tgt_mask, params.config.tgt_vocab_size,
                          dtype=params.dtype)
    return nx.scale(nx.sum_all(nx.mul(logq, w)), -1.0 / len(batch))


def loss_translation(params: ModelParams, batch: Batch,
                     dropout: Optional[np.ndarray] = None) -> Tensor:
    """Batch mean of per-sentence mean token NLL under teacher forcing."""
    _, T = _forward(params, batch)
    return _translation_nll(params, batch, T, dropout)


def compute_losses(params: ModelParams, batch: Batch, objective: str = "base",
                   dropout: Optional[np.ndarray] = None) -> LossBreakdown:
    """All components the objective needs plus their unweighted sum.

    ``dropout`` is a mask over the decoder readout ``[B, L, d_readout]`` and
    affects the translation term only.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    use_wpe, use_wpd = _HEADS[objective]
    if use_wpe and not params.has_wpe:
        raise KeyError(f"objective {objective} needs the wpe head")
    if use_wpd and not params.has_wpd:
        raise KeyError(f"objective {objective} needs the wpd head")
    enc, T = _forward(params, batch)
    out = LossBreakdown(_translation_nll(params, batch, T, dropout))
    total = out.l_t
    if use_wpe:
        out.l_wpe = _wpe_nll(params, batch, enc)
        total = nx.add(total, out.l_wpe)
    if use_wpd:
        out.l_wpd = _wpd_nll(params, batch, T)
        total = nx.add(total, out.l_wpd)
    out.composite = total
    return out


def loss_L1(params, batch, dropout=None) -> LossBreakdown:
    return compute_losses(params, batch, "L1", dropout)


def loss_L2(params, batch, dropout=None) -> LossBreakdown:
    return compute_losses(params, batch, "L2", dropout)


def loss_L3(params, batch, dropout=None) -> LossBreakdown:
    return compute_losses(params, batch, "L3", dropout)


def wpd_step_coefficients(length: int) -> list[float]:
    return [1.0 / (length - j + 1) for j in range(1, length + 1)]


# ---------------------------------------------------------------------------
# optimisation


class AdaDelta:
    """Per-coordinate AdaDelta with global-norm gradient clipping."""

    def __init__(self, rho: float = 0.95, eps: float = 1e-6):
        self.rho = rho
        self.eps = eps
        self.acc_grad: dict[str, np.ndarray] = {}
        self.acc_delta: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, clip: Optional[float] = 1.0) -> float:
        """Apply one update from ``.grad`` fields; returns the pre-clip gradient norm."""
        grads = {}
        sq = 0.0
        for name, t in params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}; update aborted")
            grads[name] = g
            sq += float(np.sum(np.square(g, dtype=np.float64)))
        norm = math.sqrt(sq)
        factor = clip / norm if clip is not None and norm > clip else 1.0
        rho, eps = self.rho, self.eps
        for name, t in params.items():
            g = grads[name] * factor if factor != 1.0 else grads[name]
            eg = self.acc_grad.get(name)
            if eg is None:
                eg = self.acc_grad[name] = np.zeros_like(t.data)
                self.acc_delta[name] = np.zeros_like(t.data)
            ed = self.acc_delta[name]
            eg *= rho
            eg += (1 - rho) * g * g
            delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
            ed *= rho
            ed += (1 - rho) * delta * delta
            t.data += delta
        return norm


def adadelta_step(state: AdaDelta, params: ModelParams, clip: Optional[float] = 1.0) -> ModelParams:
    state.step(params, clip)
    return params


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted dropout: zero with probability ``rate``, else ``1 / (1 - rate)``."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    if rate == 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return (keep / (1 - rate)).astype(dtype)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainingConfig:
    objective: str = "base"
    batch_size: int = 32
    max_epochs: int = 10
    seed: int = 1234
    dropout: float = 0.0
    clip: float = 1.0
    rho: float = 0.95
    eps: float = 1e-6
    patience: int = 3
    max_len: int = 50
    pretrain: Optional[str] = None
    finetune_all: bool = True
    init_std: float = 0.01
    dim_emb: int = 512
    dim_hid: int = 1024
    dim_att: Optional[int] = None
    dim_readout: Optional[int] = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.clip <= 0:
            raise ValueError("clip norm must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout rate must be in [0, 1)")


@dataclass
class EpochLog:
    epoch: int
    l_t: float
    l_wpe: Optional[float]
    l_wpd: Optional[float]
    composite: float
    val_l_t: Optional[float]

    def line(self) -> str:
        def f(v):
            return "-" if v is None else f"{v:.6f}"
        return "\t".join([str(self.epoch), f(self.l_t), f(self.l_wpe), f(self.l_wpd),
                          f(self.composite), f(self.val_l_t)])


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochLog] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    best_val: Optional[float] = None


def evaluate_loss(params: ModelParams, pairs: Sequence[SentencePair], batch_size: int = 32,
                  objective: str = "base") -> dict[str, Optional[float]]:
    """Pair-weighted mean of each loss component over ``pairs`` (no dropout)."""
    sums: dict[str, float] = {}
    n = 0
    for start in range(0, len(pairs), batch_size):
        batch = pad_batch(pairs[start: start + batch_size])
        vals = compute_losses(params, batch, objective).values()
        for k, v in vals.items():
            if v is not None:
                sums[k] = sums.get(k, 0.0) + v * len(batch)
        n += len(batch)
    out = {k: None for k in ("L_T", "L_WPE", "L_WPD", "composite")}
    out.update({k: v / n for k, v in sums.items()})
    return out


def prepare_params(config: TrainingConfig, src_vocab_size: int, tgt_vocab_size: int,
                   params: Optional[ModelParams] = None, dtype=np.float32) -> ModelParams:
    use_wpe, use_wpd = _HEADS[config.objective]
    if params is None and config.pretrain:
        params = load_checkpoint(config.pretrain, dtype=dtype)
        log.info("loaded pretrained parameters from %s", config.pretrain)
    if params is None:
        mc = ModelConfig(src_vocab_size, tgt_vocab_size, config.dim_emb, config.dim_hid,
                         config.dim_att, config.dim_readout)
        params = init_params(mc, rng_stream(config.seed, "init"), dtype=dtype, std=config.init_std)
    else:
        params = params.copy()
    if (params.config.src_vocab_size, params.config.tgt_vocab_size) != (src_vocab_size, tgt_vocab_size):
        raise ValueError("pretrained model does not match the vocabulary sizes")
    add_heads(params, rng_stream(config.seed, "init-heads"), wpe=use_wpe, wpd=use_wpd,
              std=config.init_std)
    return params


def train(config: TrainingConfig, train_pairs: Sequence[SentencePair], src_vocab_size: int,
          tgt_vocab_size: int, valid_pairs: Sequence[SentencePair] = (),
          params: Optional[ModelParams] = None, out_dir: Optional[str] = None,
          overwrite: bool = False) -> TrainResult:
    """Epoch loop with per-epoch checkpoints and validation early stopping.

    The returned parameters are those of the epoch with the best validation
    translation loss (the last epoch when no validation set is given).
    """
    params = prepare_params(config, src_vocab_size, tgt_vocab_size, params)
    trainable = params
    if not config.finetune_all and config.pretrain:
        head_names = [k for k in params.names() if k.startswith(("wpe.", "wpd."))]
        trainable = ModelParams({k: params[k] for k in head_names}, params.config)
    optim = AdaDelta(config.rho, config.eps)
    shuffle_rng = rng_stream(config.seed, "shuffle")
    dropout_rng = rng_stream(config.seed, "dropout")
    result = TrainResult(params)
    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "loss.log")
        if not overwrite and (os.path.exists(log_path) or os.path.exists(os.path.join(out_dir, "model.ckpt"))):
            raise FileExistsError(f"{out_dir} already holds a training run")
        log_file = io.open(log_path, "w", encoding="utf-8", newline="\n")
    best = None
    best_params = params.copy()
    bad_epochs = 0
    try:
        for epoch in range(1, config.max_epochs + 1):
            sums = {"L_T": 0.0, "L_WPE": 0.0, "L_WPD": 0.0, "composite": 0.0}
            seen = 0
            for batch in make_batches(train_pairs, config.batch_size, config.max_len, shuffle_rng):
                mask = None
                if config.dropout > 0:
                    shape = (len(batch), batch.tgt.shape[1], params.config.dim_readout)
                    mask = dropout_mask(shape, config.dropout, dropout_rng, params.dtype)
                trainable.set_requires_grad(True)
                trainable.zero_grad()
                with Tape() as tape:
                    losses = compute_losses(params, batch, config.objective, mask)
                value = float(losses.composite.data)
                if not math.isfinite(value):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}")
                nx.backward(losses.composite, tape)
                optim.step(trainable, config.clip)
                for k, v in losses.values().items():
                    if v is not None:
                        sums[k] += v * len(batch)
                seen += len(batch)
            trainable.set_requires_grad(False)
            trainable.zero_grad()
            use_wpe, use_wpd = _HEADS[config.objective]
            val = evaluate_loss(params, valid_pairs, config.batch_size)["L_T"] if valid_pairs else None
            entry = EpochLog(epoch, sums["L_T"] / seen,
                             sums["L_WPE"] / seen if use_wpe else None,
                             sums["L_WPD"] / seen if use_wpd else None,
                             sums["composite"] / seen, val)
            result.log.append(entry)
            log.info("epoch %s", entry.line())
            if log_file is not None:
                log_file.write(entry.line() + "\n")
                log_file.flush()
                path = os.path.join(out_dir, f"epoch{epoch:03d}.ckpt")
                save_checkpoint(params, path)
                result.checkpoints.append(path)
            if val is None or best is None or val < best:
                best = val
                best_params = params.copy()
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= config.patience:
                    log.info("early stop after epoch %d", epoch)
                    break
    finally:
        if log_file is not None:
            log_file.close()
    result.params = best_params
    result.best_val = best
    if out_dir is not None:
        save_checkpoint(best_params, os.path.join(out_dir, "model.ckpt"))
    return result


def with_objective(config: TrainingConfig, objective: str, **kw) -> TrainingConfig:
    return replace(config, objective=objective, **kw)


# ---------------------------------------------------------------------------
# gradient checking


def tiny_gradcheck_setup(seed: int = 0, n_pairs: int = 3, vocab: int = 12, dim_emb: int = 8,
                         dim_hid: int = 16, dim_att: int = 8, max_len: int = 5,
                         std: float = 0.5) -> tuple[ModelParams, Batch]:
    """Random float64 model with both heads and a small random batch."""
    from .data import EOS

    rng = rng_stream(seed, "gradcheck")
    cfg = ModelConfig(vocab, vocab, dim_emb, dim_hid, dim_att)
    params = init_params(cfg, rng, wpe=True, wpd=True, dtype=np.float64, std=std)
    pairs = []
    for _ in range(n_pairs):
        x = rng.integers(4, vocab, size=int(rng.integers(1, max_len + 1)))
        y = rng.integers(4, vocab, size=int(rng.integers(0, max_len)))
        pairs.append(SentencePair(tuple(int(v) for v in x), tuple(int(v) for v in y) + (EOS,)))
    return params, pad_batch(pairs)


def check_gradients(params: ModelParams, batch: Batch, objectives: Sequence[str] = OBJECTIVES,
                    h: float = 1e-5, fd_dtype=np.longdouble) -> dict[str, dict[str, float]]:
    """Per-objective, per-tensor max relative error against central differences.

    Analytic gradients come from the float64 model. The difference quotients
    are evaluated on a ``fd_dtype`` copy (extended precision where the
    platform has it) so that rounding in the loss does not swamp coordinates
    whose true derivative is below ~1e-6. One sweep records every loss
    component, so the composite objectives cost no extra forward passes.
    """
    if params.dtype != np.float64:
        raise TypeError("gradient checks need float64 parameters")
    comps = {"base": ("l_t",), "L1": ("l_t", "l_wpe"), "L2": ("l_t", "l_wpd"),
             "L3": ("l_t", "l_wpe", "l_wpd")}
    analytic: dict[str, dict[str, np.ndarray]] = {}
    for obj in objectives:
        params.set_requires_grad(True)
        params.zero_grad()
        with Tape() as tape:
            loss = compute_losses(params, batch, obj).composite
        nx.backward(loss, tape)
        analytic[obj] = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                         for k, t in params.items()}
    params.set_requires_grad(False)
    params.zero_grad()
    probe = params.astype(fd_dtype)
    full = "L3" if probe.has_wpe and probe.has_wpd else objectives[-1]
    needed = sorted({k for obj in objectives for k in comps[obj]})

    def components():
        out = compute_losses(probe, batch, full)
        return {k: getattr(out, k).data for k in needed}

    report: dict[str, dict[str, float]] = {obj: {} for obj in objectives}
    for name, t in probe.items():
        flat = t.data.reshape(-1)
        plus, minus = [], []
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus.append(components())
            flat[i] = orig - h
            minus.append(components())
            flat[i] = orig
        for obj in objectives:
            keys = comps[obj]
            num = np.array([(sum(p[k] for k in keys) - sum(m[k] for k in keys)) / (2 * h)
                            for p, m in zip(plus, minus)], dtype=np.float64).reshape(t.shape)
            report[obj][name] = nx.max_relative_error(analytic[obj][name], num)
    return report
