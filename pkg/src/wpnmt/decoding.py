"""Greedy and beam decoding, vocabulary restriction and output-layer ensembles."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .data import EOS, BOS
from .model import EncoderOutput, ModelParams, decoder_step, encode, readout, target_embedding
from .numerics import Tensor
from .word_prediction import predict_vocabulary

log = logging.getLogger(__name__)


class VocabMask:
    """Allowed target ids; EOS is always allowed."""

    def __init__(self, allowed: Iterable[int], vocab_size: int):
        ids = sorted(set(int(i) for i in allowed) | {EOS})
        if any(not 0 <= i < vocab_size for i in ids):
            raise ValueError("mask id outside the vocabulary")
        self.ids = np.asarray(ids, dtype=np.int64)
        self.vocab_size = vocab_size

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, i: int) -> bool:
        return int(i) in set(self.ids.tolist())

    def additive(self, dtype=np.float64) -> np.ndarray:
        out = np.full(self.vocab_size, nx.NEG_INF, dtype=dtype)
        out[self.ids] = 0
        return out

    @classmethod
    def full(cls, vocab_size: int) -> "VocabMask":
        return cls(range(vocab_size), vocab_size)


def masked_distribution(logits, mask: VocabMask) -> np.ndarray:
    """Softmax over allowed entries via an additive -1e9 mask on ``logits``."""
    if len(mask) == 0:
        raise ValueError("empty vocabulary mask")
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    return nx.softmax(Tensor(logits + mask.additive(logits.dtype))).data


def sliced_distribution(t: np.ndarray, W_f: np.ndarray, b_f: np.ndarray,
                        ids: Optional[np.ndarray]) -> np.ndarray:
    """Output softmax restricted to rows ``ids`` of the projection.

    Returns probabilities over ``ids`` only (all of V when ``ids`` is None).
    """
    if ids is None:
        logits = t @ W_f.T + b_f
    else:
        logits = t @ W_f[ids].T + b_f[ids]
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def ensemble_distribution(dists: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of per-model probability vectors."""
    if not dists:
        raise ValueError("empty ensemble")
    shape = dists[0].shape
    if any(d.shape != shape for d in dists):
        raise ValueError("ensemble members disagree on vocabulary size")
    if len(dists) == 1:
        return dists[0]
    return np.mean(np.stack(dists), axis=0)


@dataclass
class Hypothesis:
    tokens: tuple
    score: float
    states: list  # one decoder state row per ensemble member
    finished: bool = False


@dataclass
class DecodeResult:
    tokens: list
    score: float
    finished: bool = True
    attention: list = field(default_factory=list, repr=False)


@dataclass
class Timer:
    output_proj: float = 0.0


class _Member:
    """One ensemble member's per-sentence decoding context."""

    def __init__(self, params: ModelParams, src: Sequence[int], ids: Optional[np.ndarray]):
        self.params = params
        self.enc: EncoderOutput = encode(params, [list(src)])
        self.ids = ids
        W_f, b_f = params["decoder.W_f"].data, params["decoder.b_f"].data
        self.W_f = W_f if ids is None else np.ascontiguousarray(W_f[ids])
        self.b_f = b_f if ids is None else b_f[ids]

    def step(self, states: np.ndarray, prev: np.ndarray, timer: Optional[Timer]):
        p = self.params
        emb = target_embedding(p, prev)
        state, att = decoder_step(p, Tensor(states), emb, self.enc)
        t = readout(p, emb, state, att.c).data
        t0 = time.perf_counter()
        probs = sliced_distribution(t, self.W_f, self.b_f, None)
        if timer is not None:
            timer.output_proj += time.perf_counter() - t0
        return state.data, probs, att.a.data


def _members(models, src, mask: Optional[VocabMask]):
    ids = None if mask is None else mask.ids
    if isinstance(models, ModelParams):
        models = [models]
    v = models[0].config.tgt_vocab_size
    if any(m.config.tgt_vocab_size != v for m in models):
        raise ValueError("ensemble members disagree on vocabulary size")
    return [_Member(m, src, ids) for m in models], ids, v


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 10


def beam_search(models, src: Sequence[int], width: int = 5, max_len: Optional[int] = None,
                mask: Optional[VocabMask] = None, timer: Optional[Timer] = None,
                return_attention: bool = False) -> DecodeResult:
    """Beam search without length normalisation.

    ``models`` is one :class:`ModelParams` or a list whose output
    probabilities are averaged. With ``mask`` the output projection is sliced
    to the allowed rows.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    max_len = default_max_len(len(src)) if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    members, ids, _ = _members(models, src, mask)
    to_vocab = (lambda k: int(k)) if ids is None else (lambda k: int(ids[k]))

    live = [Hypothesis((), 0.0, [m.enc.s0.data[0] for m in members])]
    attn_rows = {(): []}
    completed: list[Hypothesis] = []
    for _ in range(max_len):
        k = width - len(completed)
        if k <= 0 or not live:
            break
        prev = np.array([h.tokens[-1] if h.tokens else BOS for h in live], dtype=np.int64)
        new_states, dists, atts = [], [], []
        for mi, m in enumerate(members):
            st = np.stack([h.states[mi] for h in live])
            s, p, a = m.step(st, prev, timer)
            new_states.append(s)
            dists.append(p)
            atts.append(a)
        probs = ensemble_distribution(dists)
        with np.errstate(divide="ignore"):
            logp = np.log(probs.astype(np.float64))
        scores = np.array([h.score for h in live])[:, None] + logp
        flat = scores.reshape(-1)
        n_cand = min(k, flat.size)
        # preselect generously, then break ties lexicographically
        cut = np.argpartition(-flat, n_cand - 1)[:n_cand]
        thresh = flat[cut].min()
        cand = np.nonzero(flat >= thresh)[0]
        V = scores.shape[1]
        cands = []
        for c in cand:
            hi, wi = divmod(int(c), V)
            cands.append((-flat[c], live[hi].tokens + (to_vocab(wi),), hi))
        cands.sort(key=lambda x: (x[0], x[1]))
        next_live = []
        for negscore, toks, hi in cands[:n_cand]:
            h = Hypothesis(toks, -negscore, [s[hi] for s in new_states], toks[-1] == EOS)
            if return_attention:
                attn_rows[toks] = attn_rows[live[hi].tokens] + [atts[0][hi]]
            (completed if h.finished else next_live).append(h)
        live = next_live

    if completed:
        best = min(completed, key=lambda h: (-h.score, h.tokens))
        finished = True
    else:
        best = min(live, key=lambda h: (-h.score, h.tokens))
        finished = False
        log.warning("no hypothesis reached EOS within %d steps", max_len)
    return DecodeResult(list(best.tokens), best.score, finished,
                        attn_rows.get(best.tokens, []) if return_attention else [])


def greedy_decode(models, src: Sequence[int], max_len: Optional[int] = None,
                  mask: Optional[VocabMask] = None, timer: Optional[Timer] = None) -> DecodeResult:
    """Argmax chain until EOS (ties to the lower id)."""
    max_len = default_max_len(len(src)) if max_len is None else max_len
    members, ids, _ = _members(models, src, mask)
    states = [m.enc.s0.data for m in members]
    tokens: list[int] = []
    score = 0.0
    prev = BOS
    for _ in range(max_len):
        dists = []
        for mi, m in enumerate(members):
            states[mi], p, _ = m.step(states[mi], np.array([prev]), timer)
            dists.append(p)
        probs = ensemble_distribution(dists)[0]
        k = int(np.argmax(probs))
        prev = k if ids is None else int(ids[k])
        tokens.append(prev)
        score += float(np.log(np.float64(probs[k])))
        if prev == EOS:
            return DecodeResult(tokens, score, True)
    return DecodeResult(tokens, score, False)


@dataclass
class TimingReport:
    sentences: int
    total_ms: float
    output_proj_ms: float
    vocab_n: Optional[int]

    def line(self) -> str:
        vn = "-" if self.vocab_n is None else str(self.vocab_n)
        return f"{self.sentences}\t{self.total_ms:.3f}\t{self.output_proj_ms:.3f}\t{vn}"


def translate_corpus(models, sentences: Sequence[Sequence[int]], width: int = 5,
                     vocab_n: Optional[int] = None, max_len: Optional[int] = None
                     ) -> tuple[list[list[int]], TimingReport]:
    """Decode every sentence; with ``vocab_n`` restrict to the WP_E top-n set.

    The prediction is made by the first model, which needs a ``wpe`` head.
    """
    primary = models if isinstance(models, ModelParams) else models[0]
    timer = Timer()
    out = []
    t0 = time.perf_counter()
    for src in sentences:
        mask = None
        if vocab_n is not None:
            enc = encode(primary, [list(src)])
            allowed = predict_vocabulary(primary, enc, vocab_n)
            mask = VocabMask(allowed, primary.config.tgt_vocab_size)
        res = beam_search(models, src, width, max_len, mask, timer)
        out.append(strip_eos(res.tokens))
    total = time.perf_counter() - t0
    return out, TimingReport(len(sentences), total * 1e3, timer.output_proj * 1e3, vocab_n)


def strip_eos(tokens: Sequence[int]) -> list[int]:
    tokens = list(tokens)
    return tokens[:-1] if tokens and tokens[-1] == EOS else tokens
