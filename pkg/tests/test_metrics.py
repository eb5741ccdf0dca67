import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sisr import metrics as mx

import oracles


def random_corpus(rng, n_sentences=10, vocab=8, max_len=12):
    words = [f"w{i}" for i in range(vocab)]
    out = []
    for _ in range(n_sentences):
        length = int(rng.integers(1, max_len))
        out.append([words[i] for i in rng.integers(0, vocab, length)])
    return out


class TestBleu:
    def test_identity(self):
        tokens = "the lungs are clear .".split()
        for n in range(1, 5):
            score, flag = mx.bleu_n(tokens, tokens, n)
            assert score == 1.0 and not flag

    def test_clipping(self):
        # "a a a a" vs "a b": clipped unigram precision 1/4
        score, _ = mx.bleu_n(list("aaaa"), list("ab"), 1)
        assert abs(score - 0.25) < 1e-12  # candidate longer, no brevity penalty

    def test_empty_candidate_degenerate(self):
        score, flag = mx.bleu_n([], list("ab"), 1)
        assert score == 0.0 and flag

    def test_against_oracle_random_corpora(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            cands = random_corpus(rng)
            refs = random_corpus(rng)
            for n in range(1, 5):
                ours, _ = mx.corpus_bleu_n(cands, refs, n)
                ref = oracles.bleu_reference(cands, refs, n)
                assert abs(ours - ref) < 1e-10

    def test_monotone_in_n(self):
        cand = "a b c d x".split()
        ref = "a b c d e".split()
        scores = [mx.bleu_n(cand, ref, n)[0] for n in range(1, 5)]
        assert all(scores[i] >= scores[i + 1] for i in range(3))


class TestRougeL:
    def test_identity(self):
        tokens = "a b c d".split()
        score, flag = mx.rouge_l(tokens, tokens)
        assert score == 1.0 and not flag

    def test_hand_case(self):
        # "a b c" vs "a c": LCS 2, P = 2/3, R = 1
        p, r, b2 = 2 / 3, 1.0, 1.2
        expect = (1 + b2) * p * r / (r + b2 * p)
        score, _ = mx.rouge_l("a b c".split(), "a c".split())
        assert abs(score - expect) < 1e-12

    def test_against_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            cand = random_corpus(rng, 1)[0]
            ref = random_corpus(rng, 1)[0]
            ours, _ = mx.rouge_l(cand, ref)
            assert abs(ours - oracles.rouge_l_reference(cand, ref)) < 1e-10

    def test_lcs_symmetry(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            a = random_corpus(rng, 1, vocab=4, max_len=8)[0]
            b = random_corpus(rng, 1, vocab=4, max_len=8)[0]
            assert mx._lcs_length(a, b) == mx._lcs_length(b, a)

    def test_empty_degenerate(self):
        score, flag = mx.rouge_l([], "a".split())
        assert score == 0.0 and flag


class TestMicroCE:
    def test_perfect(self):
        labels = [frozenset({"a"}), frozenset({"b", "c"})]
        assert mx.micro_ce(labels, labels) == (1.0, 1.0, 1.0)

    def test_all_empty_predictions(self):
        preds = [frozenset(), frozenset()]
        refs = [frozenset({"a"}), frozenset({"b"})]
        assert mx.micro_ce(preds, refs) == (0.0, 0.0, 0.0)

    def test_pooled_counts(self):
        # TP=3, FP=1, FN=2
        preds = [frozenset({"a", "b"}), frozenset({"c", "d"})]
        refs = [frozenset({"a", "b", "e"}), frozenset({"c", "f"})]
        p, r, f1 = mx.micro_ce(preds, refs)
        assert p == 0.75 and r == 0.6
        assert abs(f1 - 2 / 3) < 1e-10

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mx.micro_ce([frozenset()], [])

    def test_order_invariance(self):
        preds = [frozenset({"a"}), frozenset({"b"}), frozenset()]
        refs = [frozenset({"a"}), frozenset(), frozenset({"c"})]
        assert mx.micro_ce(preds, refs) == mx.micro_ce(preds[::-1], refs[::-1])


class TestSaliencyLocalization:
    def test_superset_recall(self):
        recall, _ = mx.saliency_localization({1, 2, 3, 4}, {2, 3})
        assert recall == 1.0

    def test_disjoint(self):
        assert mx.saliency_localization({1, 2}, {3, 4}) == (0.0, 0.0)

    def test_normal_image_skipped(self):
        recall, precision = mx.saliency_localization({1}, set())
        assert recall is None

    def test_random_selection_baseline(self):
        rng = np.random.default_rng(6)
        n_v, k = 100, 0.20
        count = int(k * n_v)  # 20: expected recall equals k exactly
        truth = set(range(5))
        recalls = []
        for _ in range(10_000):
            pred = set(rng.choice(n_v, size=count, replace=False).tolist())
            rec, _ = mx.saliency_localization(pred, truth)
            recalls.append(rec)
        assert abs(np.mean(recalls) - 0.20) < 0.01


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("abcd"), max_size=12),
       st.lists(st.sampled_from("abcd"), max_size=12))
def test_all_metrics_in_unit_interval(cand, ref):
    for n in range(1, 5):
        score, _ = mx.bleu_n(cand, ref, n)
        assert 0.0 <= score <= 1.0
    score, _ = mx.rouge_l(cand, ref)
    assert 0.0 <= score <= 1.0
