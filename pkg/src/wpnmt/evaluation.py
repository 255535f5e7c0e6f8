"""Corpus BLEU, word-prediction precision/recall, token accuracy, heatmaps."""

from __future__ import annotations

import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import BOS, EOS, PAD

DEFAULT_TOP_NS = (10, 20, 50, 100, 1000, 5000, 10000)


@dataclass
class BleuResult:
    score: float  # percentage
    precisions: list  # p1..p4 as fractions
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]],
         max_n: int = 4, lowercase: bool = True) -> BleuResult:
    """Papineni corpus BLEU with closest-reference brevity penalty, unsmoothed."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} reference sets")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for hyp, refs in zip(hypotheses, references):
        if not refs:
            raise ValueError("every hypothesis needs at least one reference")
        if lowercase:
            hyp = [t.lower() for t in hyp]
            refs = [[t.lower() for t in r] for r in refs]
        c_len += len(hyp)
        # closest reference length, shorter one on ties
        r_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            best: Counter = Counter()
            for r in refs:
                best |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, best[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if c_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    if min(precisions) == 0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuResult(score, precisions, bp, c_len, r_len)


def corpus_bleu(hypotheses, references, **kw) -> float:
    return bleu(hypotheses, references, **kw).score


def reference_set(refs: Iterable[Sequence], include_eos: bool = False) -> set:
    """Distinct tokens across all references; PAD/BOS never count."""
    drop = {PAD, BOS, "<pad>", "<s>"}
    if not include_eos:
        drop |= {EOS, "</s>"}
    return {t for r in refs for t in r if t not in drop}


def wp_precision_recall(rankings: Sequence[Sequence], references: Sequence[set],
                        top_ns: Sequence[int] = DEFAULT_TOP_NS) -> dict[int, tuple[float, float]]:
    """Macro-averaged precision/recall (percent) of the top-n predicted sets.

    ``rankings[i]`` lists predicted tokens best-first for sentence i and
    ``references[i]`` is its reference word set R.
    """
    if len(rankings) != len(references):
        raise ValueError("rankings and references differ in length")
    table = {}
    for n in top_ns:
        ps, rs = [], []
        for ranked, R in zip(rankings, references):
            T = set(list(ranked)[:n])
            hit = len(T & set(R))
            ps.append(hit / len(T) if T else 0.0)
            rs.append(hit / len(R) if R else 1.0)
        table[n] = (100.0 * float(np.mean(ps)), 100.0 * float(np.mean(rs)))
    return table


def per_sentence_recall(rankings, references, top_ns) -> np.ndarray:
    """``[sentence, n]`` recall fractions, used for monotonicity checks."""
    out = np.zeros((len(rankings), len(top_ns)))
    for i, (ranked, R) in enumerate(zip(rankings, references)):
        for k, n in enumerate(top_ns):
            T = set(list(ranked)[:n])
            out[i, k] = len(T & set(R)) / len(R) if R else 1.0
    return out


def token_accuracy(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Position-wise exact-match fraction up to the shorter length, corpus mean."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    scores = []
    for h, r in zip(hypotheses, references):
        n = min(len(h), len(r))
        scores.append(sum(a == b for a, b in zip(h[:n], r[:n])) / n if n else 0.0)
    return float(np.mean(scores)) if scores else 0.0


def export_heatmap(rows, source_tokens: Sequence[str], target_labels: Sequence[str], path) -> None:
    """Write attention rows as a TSV matrix, one row per query state."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.shape != (len(target_labels), len(source_tokens)):
        raise ValueError(f"heatmap shape {rows.shape} does not match labels "
                         f"({len(target_labels)}, {len(source_tokens)})")
    if not np.allclose(rows.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("attention rows must sum to 1")
    with io.open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\t".join([""] + list(source_tokens)) + "\n")
        for label, row in zip(target_labels, rows):
            f.write("\t".join([label] + [f"{v:.6f}" for v in row]) + "\n")


def read_heatmap(path) -> tuple[list[str], list[str], np.ndarray]:
    with io.open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n").split("\t") for ln in f if ln.strip()]
    header = lines[0][1:]
    labels = [ln[0] for ln in lines[1:]]
    values = np.array([[float(v) for v in ln[1:]] for ln in lines[1:]])
    return header, labels, values


@dataclass
class EvalReport:
    bleu: Optional[BleuResult] = None
    prediction: dict = field(default_factory=dict)
    token_accuracy: Optional[float] = None

    def lines(self) -> list[str]:
        out = []
        if self.bleu is not None:
            b = self.bleu
            out.append(f"bleu\t{b.score:.4f}")
            for i, p in enumerate(b.precisions, 1):
                out.append(f"p{i}\t{100 * p:.4f}")
            out.append(f"brevity_penalty\t{b.brevity_penalty:.6f}")
        if self.token_accuracy is not None:
            out.append(f"token_accuracy\t{self.token_accuracy:.6f}")
        for n, (p, r) in sorted(self.prediction.items()):
            out.append(f"top-{n}.precision\t{p:.2f}")
            out.append(f"top-{n}.recall\t{r:.2f}")
        return out

    def write(self, stream) -> None:
        for line in self.lines():
            stream.write(line + "\n")
