import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from taskmoe.bleu import BleuError, BleuReport, corpus_bleu

from bleu_oracle import brute_bleu


def random_corpus(seed, n_sent=6, vocab="abcde"):
    rnd = random.Random(seed)
    hyps, refs = [], []
    for _ in range(n_sent):
        ref = [rnd.choice(vocab) for _ in range(rnd.randint(1, 9))]
        hyp = [t if rnd.random() < 0.7 else rnd.choice(vocab) for t in ref]
        if rnd.random() < 0.3:
            hyp = hyp[: rnd.randint(1, len(hyp))]
        if rnd.random() < 0.3:
            hyp += [rnd.choice(vocab) for _ in range(rnd.randint(1, 3))]
        hyps.append(" ".join(hyp))
        refs.append(" ".join(ref))
    return hyps, refs


class TestHandCases:
    def test_identity(self):
        sents = ["s1 s2 s3 s4 s5", "s2 s2", "s9"]
        rep = corpus_bleu(sents, sents)
        assert rep.score == pytest.approx(100.0, abs=1e-9)
        assert rep.bp == 1.0

    def test_one_substitution(self):
        rep = corpus_bleu(["a b c d e"], ["a b c d f"])
        assert rep.precisions == pytest.approx((4 / 5, 3 / 4, 2 / 3, 1 / 2))
        assert rep.bp == 1.0
        assert rep.score == pytest.approx(100 * 0.2 ** 0.25, abs=1e-9)
        assert rep.score == pytest.approx(66.87, abs=0.01)

    def test_brevity_penalty(self):
        rep = corpus_bleu(["a"], ["a b c"])
        assert rep.bp == pytest.approx(math.exp(-2), rel=1e-12)
        assert rep.bp == pytest.approx(0.1353, abs=5e-4)
        assert rep.score == pytest.approx(100 * math.exp(-2), rel=1e-12)

    def test_smoothing_replaces_zero_matches(self):
        rep = corpus_bleu(["a b"], ["b a"])
        assert rep.matches[1] == 0.1
        assert rep.score == pytest.approx(100 * (1.0 * 0.1) ** 0.25, rel=1e-12)

    def test_clipping(self):
        rep = corpus_bleu(["the the the the"], ["the cat"])
        assert rep.precisions[0] == pytest.approx(1 / 4)

    def test_longer_hypothesis_no_penalty(self):
        assert corpus_bleu(["a b c d"], ["a b c"]).bp == 1.0

    def test_empty_hypothesis_scores_zero(self):
        assert corpus_bleu([""], ["a b"]).score == 0.0


class TestErrors:
    def test_length_mismatch(self):
        with pytest.raises(BleuError):
            corpus_bleu(["a"], ["a", "b"])

    def test_empty(self):
        with pytest.raises(BleuError):
            corpus_bleu([], [])


@pytest.mark.parametrize("seed", range(12))
def test_against_brute_force(seed):
    hyps, refs = random_corpus(seed)
    assert corpus_bleu(hyps, refs).score == pytest.approx(brute_bleu(hyps, refs), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.randoms(use_true_random=False))
def test_permutation_invariance(seed, rnd):
    hyps, refs = random_corpus(seed)
    order = list(range(len(hyps)))
    rnd.shuffle(order)
    a = corpus_bleu(hyps, refs).score
    b = corpus_bleu([hyps[i] for i in order], [refs[i] for i in order]).score
    assert a == pytest.approx(b, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_score_bounds(seed):
    rep = corpus_bleu(*random_corpus(seed))
    assert 0.0 <= rep.score <= 100.0 and rep.bp <= 1.0


def test_format_and_dict():
    rep = corpus_bleu(["a b c d e"], ["a b c d f"])
    assert rep.format().startswith("BLEU = 66.87 (80.0/75.0/66.7/50.0, BP=1.0000")
    assert BleuReport.from_dict(rep.to_dict()) == rep
