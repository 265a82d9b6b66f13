import math
from itertools import combinations

import numpy as np
import pytest

from zsdistill.errors import InputError, LabelIndexError, MetricError, QueryError
from zsdistill.model import TowerParams, init_model
from zsdistill.zeroshot import (
    DEFAULT_KS,
    LabelIndex,
    PromptTemplate,
    apply_prompt,
    build_label_index,
    evaluate,
    flat_hit_at_k,
    knn_predict,
    random_baseline,
)


def identity_tower(d):
    return TowerParams((np.eye(d),), (np.zeros(d),))


def unit(gen, n, d):
    x = gen.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def brute_force_topk(emb, q, k):
    scored = [(float(np.dot(q, e)), j) for j, e in enumerate(emb)]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [j for _, j in scored[:k]]


def brute_force_hit(preds, truth, k):
    return sum(1 for p, t in zip(preds, truth) if any(x in t for x in p[:k])) / len(preds)


class TestPrompt:
    def test_default_template(self):
        assert apply_prompt(PromptTemplate(), "crane (machine)") == "a photo of crane (machine)"

    def test_identity_template(self):
        assert apply_prompt(PromptTemplate("{label}"), "dog") == "dog"

    def test_braces_in_label_kept(self):
        assert apply_prompt(PromptTemplate(), "{x}") == "a photo of {x}"

    @pytest.mark.parametrize("pattern", ["a photo", "{label} and {label}"])
    def test_placeholder_count(self, pattern):
        with pytest.raises(InputError):
            PromptTemplate(pattern)

    def test_empty_label(self):
        with pytest.raises(InputError):
            apply_prompt(PromptTemplate(), "")


class TestIndex:
    def test_shape_and_unit_rows(self, gen):
        m = init_model(0, (5, 7), [6], 4)
        idx = build_label_index(gen.standard_normal((9, 7)), [f"l{i}" for i in range(9)], m.text_tower)
        assert idx.embeddings.shape == (9, 4)
        np.testing.assert_allclose(np.linalg.norm(idx.embeddings, axis=1), 1, atol=1e-12)

    def test_identical_features(self, gen):
        f = gen.standard_normal((1, 3))
        idx = build_label_index(np.vstack([f, f]), ["a", "b"], identity_tower(3))
        np.testing.assert_array_equal(idx.embeddings[0], idx.embeddings[1])
        assert [l for l, _ in knn_predict(idx, idx.embeddings[0], 2)] == ["a", "b"]

    def test_deterministic(self, gen):
        f = gen.standard_normal((4, 3))
        a = build_label_index(f, "abcd", identity_tower(3))
        b = build_label_index(f, "abcd", identity_tower(3))
        np.testing.assert_array_equal(a.embeddings, b.embeddings)

    def test_duplicate_labels(self, gen):
        with pytest.raises(LabelIndexError, match="'a'"):
            build_label_index(gen.standard_normal((3, 3)), ["a", "b", "a"], identity_tower(3))


class TestKnn:
    def test_self_retrieval(self, gen):
        idx = LabelIndex(tuple("abcdef"), unit(gen, 6, 4))
        label, sim = knn_predict(idx, idx.embeddings[3], 1)[0]
        assert label == "d" and sim == pytest.approx(1.0, abs=1e-12)

    def test_full_permutation(self, gen):
        idx = LabelIndex(tuple("abcdef"), unit(gen, 6, 4))
        out = knn_predict(idx, unit(gen, 1, 4)[0], 6)
        assert sorted(l for l, _ in out) == list("abcdef")
        sims = [s for _, s in out]
        assert sims == sorted(sims, reverse=True)

    def test_matches_exhaustive_oracle_with_ties(self, gen):
        # coarse lattice values force many exact ties
        emb = np.round(unit(gen, 50, 8) * 2) / 2
        emb[10] = emb[3]
        emb[40] = emb[3]
        idx = LabelIndex(tuple(range(50)), emb)
        for _ in range(200):
            q = np.round(gen.standard_normal(8))
            k = int(gen.integers(1, 51))
            got = [l for l, _ in knn_predict(idx, q, k)]
            assert got == brute_force_topk(emb, q, k)

    @pytest.mark.parametrize("k", [0, 7])
    def test_k_range(self, gen, k):
        idx = LabelIndex(tuple("abcdef"), unit(gen, 6, 4))
        with pytest.raises(QueryError):
            knn_predict(idx, idx.embeddings[0], k)


class TestFlatHit:
    def test_examples(self):
        assert flat_hit_at_k([["A", "B"]], [{"A"}], 1) == 1.0
        assert flat_hit_at_k([["B", "A"]], [{"A"}], 1) == 0.0
        assert flat_hit_at_k([["B", "A"]], [{"A"}], 2) == 1.0

    def test_multi_label_either_hits(self):
        assert flat_hit_at_k([["B", "C"], ["D", "A"]], [{"A", "B"}, {"A", "B"}], 1) == 0.5

    def test_random_oracle(self, gen):
        labels = list(range(30))
        for _ in range(500):
            n = int(gen.integers(1, 12))
            preds = [list(gen.permutation(labels)[:10]) for _ in range(n)]
            truth = [set(gen.choice(labels, int(gen.integers(1, 5)), replace=False)) for _ in range(n)]
            vals = [flat_hit_at_k(preds, truth, k) for k in (1, 2, 5, 10)]
            assert vals == [brute_force_hit(preds, truth, k) for k in (1, 2, 5, 10)]
            assert vals == sorted(vals)

    def test_errors(self):
        with pytest.raises(MetricError):
            flat_hit_at_k([["A"]], [set()], 1)
        with pytest.raises(MetricError):
            flat_hit_at_k([["A"]], [{"A"}], 2)
        with pytest.raises(MetricError):
            flat_hit_at_k([], [], 1)


class TestBaseline:
    def test_matches_enumeration(self):
        c = 7
        for size in (1, 2, 3):
            for k in (1, 2, 5):
                truth = set(range(size))
                subsets = list(combinations(range(c), k))
                exact = sum(1 for s in subsets if truth & set(s)) / len(subsets)
                assert random_baseline([truth], c, k) == pytest.approx(exact, abs=1e-15)

    def test_single_label(self):
        assert random_baseline([{0}], 64, 5) == pytest.approx(5 / 64, abs=1e-15)


class TestEvaluate:
    def test_perfect_retrieval(self, gen):
        labels = [f"c{i}" for i in range(12)]
        feats = unit(gen, 12, 6)
        model = init_model(0, (6, 6), [], 6)
        from zsdistill.model import TwoTowerModel
        model = TwoTowerModel(identity_tower(6), identity_tower(6))
        truth = [{labels[i % 12]} for i in range(40)]
        images = np.array([feats[i % 12] * 3 for i in range(40)])
        res = evaluate(model, images, truth, feats, labels)
        assert res.fh[1] == 1.0 and res.n == 40
        assert list(res.fh) == list(DEFAULT_KS)

    def test_untrained_near_chance(self, gen):
        # distinct random images, single labels: hits ~ Binomial(n, k / C)
        c, n = 40, 4000
        model = init_model(5, (10, 10), [16], 8)
        feats = gen.standard_normal((c, 10))
        labels = list(range(c))
        truth = [{int(t)} for t in gen.integers(0, c, n)]
        res = evaluate(model, gen.standard_normal((n, 10)), truth, feats, labels)
        for k in DEFAULT_KS:
            p = k / c
            assert abs(res.fh[k] - p) <= 3 * math.sqrt(p * (1 - p) / n)
            assert res.baseline[k] == pytest.approx(p)

    def test_monotone_and_json(self, gen):
        model = init_model(1, (5, 5), [], 4)
        res = evaluate(model, gen.standard_normal((50, 5)), [{0, 3}] * 50, gen.standard_normal((12, 5)), range(12))
        vals = list(res.fh.values())
        assert vals == sorted(vals)
        js = res.to_json()
        assert set(js) == {"fh", "n", "baseline"} and set(js["fh"]) == {"1", "2", "5", "10"}

    def test_ks_validation(self, gen):
        model = init_model(1, (5, 5), [], 4)
        with pytest.raises(QueryError, match="C = 6"):
            evaluate(model, np.ones((2, 5)), [{0}, {1}], gen.standard_normal((6, 5)), range(6), (1, 10))
        with pytest.raises(QueryError):
            evaluate(model, np.ones((2, 5)), [{0}, {1}], gen.standard_normal((6, 5)), range(6), (2, 1))
