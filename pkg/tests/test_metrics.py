import logging

import numpy as np
import pytest

from bidicap.errors import InputError
from bidicap.metrics import bleu, build_document_frequency, cider, ngram_counts

from oracles import bleu_brute, cider_brute


def toy_corpus(seed=0, n_images=10):
    """Small corpus with overlapping vocabulary across images."""
    rng = np.random.default_rng(seed)
    words = ["a", "red", "blue", "dog", "cat", "runs", "sleeps", "fast", "the", "park"]
    references, candidates = [], []
    for _ in range(n_images):
        refs = []
        for _ in range(3):
            n = int(rng.integers(4, 9))
            refs.append([words[int(i)] for i in rng.integers(0, len(words), n)])
        references.append(refs)
        n = int(rng.integers(3, 9))
        candidates.append([words[int(i)] for i in rng.integers(0, len(words), n)])
    return candidates, references


class TestCider:
    def test_identical_candidate_on_unique_ngram_corpus_scores_ten(self):
        references = [
            [["a", "b", "c", "d", "e"]],
            [["f", "g", "h", "i", "j"]],
            [["k", "l", "m", "n", "o"]],
        ]
        candidates = [["a", "b", "c", "d", "e"],
                      ["f", "g", "h", "i", "j"],
                      ["k", "l", "m", "n", "o"]]
        corpus, per_image = cider(candidates, references)
        assert np.allclose(per_image, 10.0, atol=1e-9)
        assert abs(corpus - 10.0) < 1e-9

    def test_disjoint_ngrams_score_zero(self):
        references = [[["a", "b", "c"]], [["d", "e", "f"]]]
        candidates = [["x", "y", "z"], ["q", "r", "s"]]
        corpus, per_image = cider(candidates, references)
        assert corpus == 0.0 and (per_image == 0.0).all()

    @pytest.mark.parametrize("variant", ["cider", "cider-d"])
    def test_matches_brute_force_oracle(self, variant):
        candidates, references = toy_corpus()
        got_corpus, got = cider(candidates, references, variant)
        want_corpus, want = cider_brute(candidates, references, variant)
        assert np.abs(got - want).max() < 1e-6
        assert abs(got_corpus - want_corpus) < 1e-6

    def test_empty_candidate_scores_zero_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            _, per_image = cider([[], ["a"]], [[["a", "b"]], [["a", "b"]]])
        assert per_image[0] == 0.0
        assert any("empty candidate" in r.message for r in caplog.records)

    def test_permutation_invariance(self):
        candidates, references = toy_corpus(3)
        base, _ = cider(candidates, references)
        perm = np.random.default_rng(0).permutation(len(candidates))
        shuffled, _ = cider([candidates[i] for i in perm],
                            [references[i] for i in perm])
        assert abs(base - shuffled) < 1e-12

    def test_scores_bounded(self):
        candidates, references = toy_corpus(5)
        _, per_image = cider(candidates, references)
        assert (per_image >= 0).all() and (per_image <= 10.0 + 1e-9).all()

    def test_deterministic(self):
        candidates, references = toy_corpus(7)
        a = cider(candidates, references)
        b = cider(candidates, references)
        assert a[0] == b[0] and np.array_equal(a[1], b[1])

    def test_precomputed_document_frequencies(self):
        candidates, references = toy_corpus(11)
        df = build_document_frequency(references)
        with_df, _ = cider(candidates, references, df=df)
        without, _ = cider(candidates, references)
        assert abs(with_df - without) < 1e-12
        assert all(v <= df.n_images for v in df.counts.values())

    def test_unknown_variant_rejected(self):
        with pytest.raises(InputError):
            cider([["a"]], [[["a"]]], variant="rouge")


class TestBleu:
    def test_candidate_equal_to_reference_is_one(self):
        refs = [[["the", "dog", "runs", "in", "the", "park"]]]
        cand = [["the", "dog", "runs", "in", "the", "park"]]
        scores = bleu(cand, refs)
        assert np.allclose(scores, 1.0, atol=1e-12)

    def test_long_candidate_with_all_matches_has_no_brevity_penalty(self):
        # candidate longer than the reference: precision-limited, BP = 1
        refs = [[["a", "b", "a", "b", "a"]]]
        cand = [["a", "b", "a", "b", "a", "b"]]
        scores = bleu(cand, refs)
        brute = bleu_brute(cand, refs)
        assert np.allclose(scores, brute, atol=1e-12)
        assert scores[0] == pytest.approx(5 / 6)

    def test_matches_brute_force_oracle(self):
        candidates, references = toy_corpus(13)
        assert np.allclose(bleu(candidates, references),
                           bleu_brute(candidates, references), atol=1e-6)

    def test_zero_matches_gives_zero_without_smoothing(self):
        scores = bleu([["x", "y"]], [[["a", "b"]]])
        assert scores == [0.0, 0.0, 0.0, 0.0]

    def test_bounds(self):
        candidates, references = toy_corpus(17)
        assert all(0.0 <= s <= 1.0 for s in bleu(candidates, references))


def test_ngram_counts_shape():
    counts = ngram_counts(["a", "b", "a"])
    assert counts[0][("a",)] == 2
    assert counts[1][("a", "b")] == 1
    assert counts[2][("a", "b", "a")] == 1
    assert not counts[3]
