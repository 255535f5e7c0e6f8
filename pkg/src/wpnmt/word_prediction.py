"""Bag-of-words prediction heads on the initial state and on decoder states."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .data import BOS, EOS, PAD, UNK
from .model import AttentionResult, EncoderOutput, ModelParams, attention, output_logits
from .numerics import Tensor

FORCED = frozenset({PAD, UNK, BOS, EOS})


def _require(params: ModelParams, head: str) -> None:
    ok = params.has_wpe if head == "wpe" else params.has_wpd
    if not ok:
        raise KeyError(f"model has no {head} head")


def wpe_context(params: ModelParams, enc: EncoderOutput) -> AttentionResult:
    """Attention over the source with the initial state as query."""
    _require(params, "wpe")
    return attention(params.group("wpe.att"), enc.s0, enc, key="wpe.att")


def wpe_logits(params: ModelParams, enc: EncoderOutput) -> Tensor:
    c_p = wpe_context(params, enc).c
    t = nx.tanh(nx.linear(nx.concat([enc.s0, c_p]), params["wpe.W_t"], params["wpe.b_t"]))
    return nx.linear(t, params["wpe.W_f"], params["wpe.b_f"])


def wpe_distribution(params: ModelParams, enc: EncoderOutput) -> Tensor:
    """One target-word distribution per sentence, shared by every position."""
    return nx.softmax(wpe_logits(params, enc))


def bag_counts(y: Iterable[Sequence[int]], vocab_size: int, dtype=np.float64) -> np.ndarray:
    """Count matrix ``[B, V]`` of target ids; PAD is never counted."""
    rows = list(y)
    out = np.zeros((len(rows), vocab_size), dtype=dtype)
    for b, seq in enumerate(rows):
        for tok in seq:
            if tok != PAD:
                out[b, tok] += 1
    return out


def wpe_log_prob(params: ModelParams, enc: EncoderOutput, y: Sequence[int]) -> Tensor:
    """``sum_j log P_wpe(y_j | x)`` for a single sentence (duplicates counted)."""
    if len(y) < 1:
        raise ValueError("empty target")
    logp = nx.log_softmax(wpe_logits(params, enc))
    counts = bag_counts([y], params.config.tgt_vocab_size, dtype=params.dtype)
    return nx.sum_all(nx.mul(logp, counts))


def wpd_logits(params: ModelParams, t_d: Tensor) -> Tensor:
    """Transform the decoder readout by ``tanh(W_p .)`` and reuse the output layer."""
    _require(params, "wpd")
    p = nx.tanh(nx.linear(t_d, params["wpd.W_p"], params["wpd.b_p"]))
    return output_logits(params, p)


def wpd_distribution(params: ModelParams, t_d: Tensor) -> Tensor:
    """Per-step distribution over the words still to be generated.

    ``t_d`` is the decoder's readout at step j, i.e. the same input
    :func:`wpnmt.model.output_distribution` feeds to the output projection.
    """
    return nx.softmax(wpd_logits(params, t_d))


def wpd_log_prob(params: ModelParams, t_d: Tensor, y: Sequence[int], j: int) -> Tensor:
    """``sum_{k=j}^{|y|} log q_j(y_k)`` for 1-based step ``j`` of one sentence."""
    if not 1 <= j <= len(y):
        raise IndexError(f"step {j} outside 1..{len(y)}")
    logp = nx.log_softmax(wpd_logits(params, t_d))
    counts = bag_counts([y[j - 1:]], params.config.tgt_vocab_size, dtype=params.dtype)
    return nx.sum_all(nx.mul(logp, counts))


def remaining_weights(tgt: np.ndarray, tgt_mask: np.ndarray, vocab_size: int,
                      dtype=np.float64) -> np.ndarray:
    """``W[b, j, v] = count(v in y_b[j:]) / (|y_b| - j)`` on real steps, else 0.

    Summing ``W * log q`` over ``j, v`` gives the per-sentence WP_D likelihood
    with the averaging coefficient folded in.
    """
    B, L = tgt.shape
    out = np.zeros((B, L, vocab_size), dtype=dtype)
    lengths = tgt_mask.sum(axis=1).astype(int)
    for b in range(B):
        n = lengths[b]
        counts = np.zeros(vocab_size, dtype=dtype)
        for j in range(n - 1, -1, -1):
            counts[tgt[b, j]] += 1
            out[b, j] = counts / (n - j)
    return out


def rank_vocabulary(dist: np.ndarray) -> np.ndarray:
    """Ids sorted by descending probability, ties by lower id."""
    dist = np.asarray(dist).reshape(-1)
    return np.lexsort((np.arange(dist.size), -dist))


def predict_vocabulary(params: ModelParams, enc: EncoderOutput, n: int,
                       forced: Iterable[int] = FORCED) -> set[int]:
    """Top-``n`` WP_E ids for one sentence plus the forced special tokens."""
    if n < 1:
        raise ValueError("n must be >= 1")
    dist = wpe_distribution(params, enc).data[0]
    n = min(n, dist.size)
    top = rank_vocabulary(dist)[:n]
    return {int(i) for i in top} | set(forced)
