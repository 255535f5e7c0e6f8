import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wpnmt import numerics as nx
from wpnmt.data import BOS, EOS
from wpnmt.decoding import (Timer, TimingReport, VocabMask, beam_search, ensemble_distribution,
                            greedy_decode, masked_distribution, sliced_distribution, strip_eos,
                            translate_corpus)
from wpnmt.model import ModelConfig, encode, init_params, output_distribution, target_embedding, \
    decoder_step
from wpnmt.numerics import Tensor


def tiny(seed=0, V=8, std=1.5, wpe=False):
    cfg = ModelConfig(V, V, 6, 5, 4)
    return init_params(cfg, np.random.default_rng(seed), wpe=wpe, dtype=np.float64, std=std)


def sequence_logprob(params, src, tokens):
    """Score a full output sequence with the model's own step functions."""
    enc = encode(params, src)
    state, prev, total = enc.s0, BOS, 0.0
    for tok in tokens:
        emb = target_embedding(params, [prev])
        state, att = decoder_step(params, state, emb, enc)
        total += float(np.log(output_distribution(params, state, emb, att).data[0, tok]))
        prev = tok
    return total


def brute_force(params, src, max_len, V):
    best = None
    for n in range(1, max_len + 1):
        for prefix in itertools.product([v for v in range(V) if v != EOS], repeat=n - 1):
            seq = prefix + (EOS,)
            key = (-sequence_logprob(params, src, seq), seq)
            best = key if best is None or key < best else best
    return list(best[1]), -best[0]


@pytest.mark.parametrize("seed", range(4))
def test_wide_beam_matches_exhaustive_search(seed):
    V = 5
    p = tiny(seed=seed, V=V)
    src = [4, 3, 4]
    tokens, score = brute_force(p, src, 2, V)
    res = beam_search(p, src, width=V * V, max_len=2)
    assert res.finished
    assert res.tokens == tokens
    assert res.score == pytest.approx(score, abs=1e-9)


def test_beam_one_equals_greedy():
    for seed in range(10):
        p = tiny(seed=seed)
        src = [4, 5, 6]
        g = greedy_decode(p, src)
        b = beam_search(p, src, width=1)
        assert g.tokens == b.tokens
        assert g.score == pytest.approx(b.score, abs=1e-9)


def test_beam_invalid_width():
    with pytest.raises(ValueError):
        beam_search(tiny(), [4], width=0)


def test_unfinished_search_warns_and_respects_max_len(caplog):
    p = tiny()
    p["decoder.b_f"].data[EOS] = -100.0
    with caplog.at_level(logging.WARNING):
        res = beam_search(p, [4, 5], width=3, max_len=4)
    assert not res.finished and len(res.tokens) == 4
    assert "EOS" in caplog.text


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(4, 7), min_size=1, max_size=4))
def test_wider_beam_never_scores_worse(seed, src):
    p = tiny(seed=seed)
    results = [beam_search(p, src, w, max_len=12) for w in (1, 2, 3, 5)]
    for r in results:
        assert r.tokens[-1] == EOS or len(r.tokens) == 12
    for a, b in zip(results, results[1:]):
        # only finished searches carry comparable sentence scores
        if a.finished and b.finished:
            assert b.score >= a.score - 1e-9


def test_hypothesis_scores_non_increasing():
    p = tiny(seed=2)
    res = beam_search(p, [5, 6], width=3)
    partial = [sequence_logprob(p, [5, 6], res.tokens[:k]) for k in range(1, len(res.tokens) + 1)]
    assert all(b <= a + 1e-12 for a, b in zip(partial, partial[1:]))
    assert partial[-1] == pytest.approx(res.score, abs=1e-9)


def test_vocab_mask_keeps_eos():
    m = VocabMask([5, 1], 8)
    assert m.ids.tolist() == [1, 3, 5]
    assert EOS in m
    with pytest.raises(ValueError):
        VocabMask([8], 8)
    assert len(VocabMask.full(8)) == 8


def test_masked_distribution_examples():
    logits = np.random.default_rng(0).normal(size=8)
    full = masked_distribution(logits, VocabMask.full(8))
    np.testing.assert_allclose(full, nx.softmax(Tensor(logits)).data, atol=1e-9)
    single = masked_distribution(logits, VocabMask([], 8))
    assert single[EOS] == pytest.approx(1.0)
    m = VocabMask([int(np.argmax(logits)), 6], 8)
    d = masked_distribution(logits, m)
    assert np.argmax(d) == np.argmax(logits)
    assert d[[i for i in range(8) if i not in m]].max() <= 1e-30


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sets(st.integers(0, 29), min_size=1, max_size=29))
def test_sliced_and_masked_paths_agree(seed, allowed):
    rng = np.random.default_rng(seed)
    W, b, t = rng.normal(size=(30, 6)), rng.normal(size=30), rng.normal(size=(1, 6))
    mask = VocabMask(allowed, 30)
    masked = masked_distribution(t @ W.T + b, mask)[0]
    sliced = sliced_distribution(t, W, b, mask.ids)[0]
    np.testing.assert_allclose(sliced, masked[mask.ids], atol=1e-6)


def test_ensemble_examples():
    a = np.array([[1.0, 0.0]])
    assert ensemble_distribution([a]) is a
    np.testing.assert_allclose(ensemble_distribution([a, a, a]), a, atol=1e-9)
    np.testing.assert_allclose(ensemble_distribution([a, np.array([[0.0, 1.0]])]), [[0.5, 0.5]])
    with pytest.raises(ValueError):
        ensemble_distribution([a, np.ones((1, 3)) / 3])
    with pytest.raises(ValueError):
        ensemble_distribution([])


def test_ensemble_of_identical_models_matches_single():
    p = tiny(seed=4)
    one = beam_search(p, [4, 5], width=3)
    three = beam_search([p, p.copy(), p.copy()], [4, 5], width=3)
    assert one.tokens == three.tokens
    assert one.score == pytest.approx(three.score, abs=1e-9)
    with pytest.raises(ValueError):
        beam_search([p, tiny(V=9)], [4], width=2)


def test_ensemble_averages_probabilities():
    p, q = tiny(seed=1), tiny(seed=2)
    src = [4, 6]
    res = greedy_decode([p, q], src, max_len=1)
    d = []
    for m in (p, q):
        enc = encode(m, src)
        emb = target_embedding(m, [BOS])
        s, att = decoder_step(m, enc.s0, emb, enc)
        d.append(output_distribution(m, s, emb, att).data[0])
    mean = (d[0] + d[1]) / 2
    assert res.tokens == [int(np.argmax(mean))]
    assert res.score == pytest.approx(np.log(mean.max()))


@pytest.mark.parametrize("seed", range(8))
def test_masked_greedy_reproduces_unmasked_output(seed):
    p = tiny(seed=seed)
    src = [4, 5, 7]
    free = greedy_decode(p, src)
    rng = np.random.default_rng(seed)
    extra = rng.choice(8, size=2, replace=False).tolist()
    mask = VocabMask(set(free.tokens) | set(extra), 8)
    restricted = greedy_decode(p, src, mask=mask)
    assert restricted.tokens == free.tokens


def test_restricted_output_stays_in_mask():
    p = tiny(seed=3)
    mask = VocabMask([5, 6], 8)
    res = beam_search(p, [4, 5], width=3, mask=mask)
    assert set(res.tokens) <= {5, 6, EOS}


def test_translate_corpus_full_vocab_matches_unrestricted():
    p = tiny(seed=5, wpe=True)
    sents = [[4, 5], [6], [7, 4, 5]]
    free, rep_free = translate_corpus(p, sents, width=2)
    full, rep_full = translate_corpus(p, sents, width=2, vocab_n=8)
    assert free == full
    assert rep_full.vocab_n == 8 and rep_free.vocab_n is None
    assert rep_free.sentences == 3 and rep_free.output_proj_ms <= rep_free.total_ms
    assert len(rep_full.line().split("\t")) == 4


def test_timer_accumulates_and_report_line():
    t = Timer()
    greedy_decode(tiny(), [4, 5], timer=t)
    assert t.output_proj > 0
    assert TimingReport(2, 10.0, 2.5, None).line() == "2\t10.000\t2.500\t-"


def test_attention_rows_returned():
    p = tiny(seed=6)
    res = beam_search(p, [4, 5, 6], width=2, return_attention=True)
    assert len(res.attention) == len(res.tokens)
    for row in res.attention:
        assert abs(row.sum() - 1) < 1e-6 and row.shape == (3,)


def test_strip_eos():
    assert strip_eos([4, 5, EOS]) == [4, 5]
    assert strip_eos([4, 5]) == [4, 5]
