"""Corpus loading, vocabularies, batching and synthetic tasks."""

from __future__ import annotations

import io
from pathlib import Path
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>")
DEFAULT_MAX_SIZE = 30000
DEFAULT_MAX_LEN = 50


class Vocabulary:
    """Token/id bijection with ids 0..3 reserved for PAD, UNK, BOS, EOS."""

    def __init__(self, tokens: Sequence[str], freqs: Sequence[int] | None = None,
                 max_size: int = DEFAULT_MAX_SIZE):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(tokens) > max_size:
            raise ValueError(f"{len(tokens)} tokens exceed max size {max_size}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.freqs = list(freqs) if freqs is not None else [0] * len(tokens)
        self.max_size = max_size

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise IndexError(f"id {i} out of range for vocabulary of size {len(self)}")
            out.append(self.tokens[i])
        return out

    def save(self, path) -> None:
        with io.open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok, n in zip(self.tokens, self.freqs):
                f.write(f"{tok}\t{n}\n")

    @classmethod
    def load(cls, path, max_size: int = DEFAULT_MAX_SIZE) -> "Vocabulary":
        tokens, freqs = [], []
        with io.open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, _, n = line.rpartition("\t")
                tokens.append(tok)
                freqs.append(int(n))
        return cls(tokens, freqs, max_size=max(max_size, len(tokens)))


def build_vocab(corpus: Iterable[Sequence[str] | str], max_size: int = DEFAULT_MAX_SIZE) -> Vocabulary:
    """Rank tokens by descending frequency, ties by first occurrence.

    Lines may be given as strings (whitespace-split) or token lists.
    """
    if max_size < len(SPECIALS):
        raise ValueError("max_size must leave room for reserved tokens")
    counts: Counter = Counter()
    first: dict[str, int] = {}
    seen_any = False
    for line in corpus:
        seen_any = True
        toks = line.split() if isinstance(line, str) else line
        for t in toks:
            if t in SPECIALS:
                continue
            if t not in first:
                first[t] = len(first)
            counts[t] += 1
    if not seen_any or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], first[t]))
    ranked = ranked[: max_size - len(SPECIALS)]
    return Vocabulary(list(SPECIALS) + ranked, [0] * 4 + [counts[t] for t in ranked], max_size)


@dataclass(frozen=True)
class SentencePair:
    x: tuple
    y: tuple  # EOS-terminated

    def __post_init__(self):
        if not self.x or not self.y:
            raise ValueError("empty sentence")
        if PAD in self.x or PAD in self.y:
            raise ValueError("PAD id inside sentence")


@dataclass(frozen=True)
class Batch:
    src: np.ndarray
    tgt: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    pairs: tuple = field(default=(), repr=False)

    def __len__(self) -> int:
        return self.src.shape[0]


def encode_pair(src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                src_tokens: Sequence[str], tgt_tokens: Sequence[str]) -> SentencePair:
    return SentencePair(tuple(src_vocab.encode(src_tokens)),
                        tuple(tgt_vocab.encode(tgt_tokens)) + (EOS,))


def read_lines(path) -> list[list[str]]:
    with io.open(path, encoding="utf-8", newline="") as f:
        text = f.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [line.split() for line in lines]


def load_parallel(src_path, tgt_path) -> list[tuple[list[str], list[str]]]:
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise ValueError(f"parallel files differ in length: {len(src)} vs {len(tgt)} lines")
    return list(zip(src, tgt))


def write_lines(path, lines: Iterable[Sequence[str]]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with io.open(path, "w", encoding="utf-8", newline="\n") as f:
        for toks in lines:
            f.write(" ".join(toks) + "\n")


def pad_batch(pairs: Sequence[SentencePair]) -> Batch:
    n = len(pairs)
    lx = max(len(p.x) for p in pairs)
    ly = max(len(p.y) for p in pairs)
    src = np.full((n, lx), PAD, dtype=np.int64)
    tgt = np.full((n, ly), PAD, dtype=np.int64)
    for i, p in enumerate(pairs):
        src[i, : len(p.x)] = p.x
        tgt[i, : len(p.y)] = p.y
    return Batch(src, tgt, (src != PAD).astype(np.float32), (tgt != PAD).astype(np.float32),
                 tuple(pairs))


def filter_length(pairs: Iterable[SentencePair], max_len: int = DEFAULT_MAX_LEN) -> list[SentencePair]:
    # the target carries an appended EOS that does not count as a word
    return [p for p in pairs if len(p.x) <= max_len and len(p.y) - 1 <= max_len]


def make_batches(pairs: Sequence[SentencePair], batch_size: int = 32,
                 max_len: int = DEFAULT_MAX_LEN, shuffle_seed=None) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    kept = filter_length(pairs, max_len)
    order = np.arange(len(kept))
    if shuffle_seed is not None:
        rng = shuffle_seed if isinstance(shuffle_seed, np.random.Generator) \
            else np.random.default_rng(shuffle_seed)
        rng.shuffle(order)
    for start in range(0, len(kept), batch_size):
        yield pad_batch([kept[i] for i in order[start: start + batch_size]])


def remaining_bag(y: Sequence[int], j: int) -> Counter:
    """Multiset of target ids still to be produced at 1-based step ``j``."""
    if not 1 <= j <= len(y):
        raise IndexError(f"step {j} outside 1..{len(y)}")
    return Counter(y[j - 1:])


TASKS = ("copy", "reverse", "digit-shift")


def gen_synthetic(task: str, n: int, vocab_size: int, len_range=(3, 8), seed=0
                  ) -> list[tuple[list[str], list[str]]]:
    """Token-level parallel data for a toy task.

    Symbols are the strings ``"0" .. str(vocab_size - 5)`` so that together with
    the four reserved tokens the target vocabulary has ``vocab_size`` entries.
    Targets carry no EOS; it is appended when pairs are encoded.
    """
    if vocab_size < 5:
        raise ValueError("vocab_size must be >= 5")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    base = vocab_size - len(SPECIALS)
    lo, hi = len_range
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        xs = [int(v) for v in rng.integers(0, base, size=length)]
        out.append(([str(v) for v in xs], [str(v) for v in apply_task(task, xs, base)]))
    return out


def apply_task(task: str, xs: Sequence[int], base: int) -> list[int]:
    if task == "copy":
        return list(xs)
    if task == "reverse":
        return list(reversed(xs))
    if task == "digit-shift":
        return [(v + 1) % base for v in xs]
    raise ValueError(f"unknown task {task!r}")
