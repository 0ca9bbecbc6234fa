from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taskembed import analytics as A
from taskembed.analytics import EmbeddingSpace


def space(matrix, ids, seeds=None, types=None, run_id="r"):
    n = len(ids)
    return EmbeddingSpace(np.asarray(matrix, float), list(ids), seeds or [0] * n,
                          types or ["Other"] * n, run_id)


class TestKnn:
    def test_single_aligned_row(self):
        m = np.array([[1.0, 0, 0], [2.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
        assert A.cosine_knn(m, 0, 1) == [1]

    def test_duplicate_ranks_first(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(6, 4))
        m[4] = m[1]
        assert A.cosine_knn(m, 1, 3)[0] == 4
        assert A.cosine_similarity_matrix(m)[1, 4] == pytest.approx(1.0)

    @given(arrays(np.float64, 6, elements=st.floats(0.1, 10)))
    def test_scale_invariance(self, scales):
        rng = np.random.default_rng(1)
        m = rng.normal(size=(6, 5))
        for row in range(6):
            assert A.cosine_knn(m, row, 3) == A.cosine_knn(m * scales[:, None], row, 3)

    def test_zero_row_rejected(self):
        with pytest.raises(ValueError):
            A.cosine_knn(np.zeros((3, 2)), 0, 1)


class TestPositionStability:
    def test_identical_seeds(self):
        rng = np.random.default_rng(0)
        base = rng.normal(size=(12, 8))
        m = np.repeat(base, 3, axis=0)
        ids = np.repeat([f"t{i}" for i in range(12)], 3).tolist()
        rep = A.position_stability(space(m, ids, [0, 1, 2] * 12), k=10)
        assert rep.overall == 1.0 and set(rep.per_type.values()) == {1.0}

    def test_scattered_seeds_near_baseline(self):
        rng = np.random.default_rng(3)
        ids = np.repeat([f"t{i}" for i in range(32)], 3).tolist()
        rates = [A.position_stability(space(rng.normal(size=(96, 32)), ids, [0, 1, 2] * 32)).overall
                 for _ in range(40)]
        assert abs(np.mean(rates) - A.exact_position_baseline(32, 3, 10)) < 0.03

    def test_needs_siblings(self):
        with pytest.raises(ValueError):
            A.position_stability(space(np.eye(12), [f"t{i}" for i in range(12)]))

    def test_exact_baseline_formula(self):
        # 1 - C(93,10)/C(95,10), by direct product over the draws
        m = 96
        p_none = 1.0
        for i in range(10):
            p_none *= (m - 3 - i) / (m - 1 - i)
        assert A.exact_position_baseline(32, 3, 10) == pytest.approx(1 - p_none, abs=1e-14)
        assert A.exact_position_baseline(32, 3, 10) == pytest.approx(1 - comb(93, 10) / comb(95, 10))

    def test_monte_carlo_matches_exact(self):
        mean, se = A.random_position_baseline(32, 3, 10, 32, trials=400, rng=np.random.default_rng(0))
        assert se > 0
        assert abs(mean - A.exact_position_baseline(32, 3, 10)) < 4 * se + 1e-3


class TestJaccard:
    def test_values(self):
        assert A.jaccard({"a", "b", "c"}, {"b", "c", "d"}) == 0.5
        assert A.jaccard({"a"}, {"b"}) == 0.0

    def test_same_space(self):
        rng = np.random.default_rng(0)
        s = space(rng.normal(size=(15, 4)), [f"t{i}" for i in range(15)])
        rep = A.neighborhood_stability(s, s, k=5)
        assert set(rep.per_task.values()) == {1.0}

    def test_order_of_rows_irrelevant(self):
        rng = np.random.default_rng(1)
        m = rng.normal(size=(15, 4))
        ids = [f"t{i}" for i in range(15)]
        a = space(m, ids)
        b = space(m[::-1], ids[::-1])
        assert A.neighborhood_stability(a, b, k=5).overall == 1.0

    def test_mismatched_tasks(self):
        a = space(np.eye(12), [f"t{i}" for i in range(12)])
        b = space(np.eye(12), [f"u{i}" for i in range(12)])
        with pytest.raises(ValueError):
            A.neighborhood_stability(a, b, k=3)


class TestPCA:
    def test_single_axis(self):
        x = np.zeros((10, 3))
        x[:, 1] = np.arange(10)
        res = A.pca(x, 2)
        np.testing.assert_allclose(np.abs(res.components[0]), [0, 1, 0], atol=1e-12)

    @settings(max_examples=30)
    @given(arrays(np.float64, (12, 5), elements=st.floats(-5, 5)))
    def test_orthonormal_and_ordered(self, x):
        xc = x - x.mean(0)
        if np.allclose(xc, 0.0) or np.linalg.matrix_rank(xc) < 2:
            return
        res = A.pca(x, 2)
        np.testing.assert_allclose(res.components @ res.components.T, np.eye(2), atol=1e-8)
        assert res.explained_variance[0] >= res.explained_variance[1]

    def test_constant_rows(self):
        with pytest.raises(ValueError):
            A.pca(np.ones((5, 3)))


class TestGMM:
    def blobs(self):
        rng = np.random.default_rng(0)
        return np.vstack([rng.normal(-5, 0.5, (40, 2)), rng.normal(5, 0.5, (40, 2))])

    def test_two_blobs(self):
        model, resp = A.gmm_fit(self.blobs(), n_components=2, seed=0)
        assert resp.max(axis=1).min() >= 0.99
        np.testing.assert_allclose(resp.sum(axis=1), 1.0, atol=1e-9)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 1000), st.integers(2, 4))
    def test_likelihood_monotone(self, seed, k):
        x = np.random.default_rng(seed).normal(size=(30, 3))
        model, resp = A.gmm_fit(x, n_components=k, seed=seed)
        ll = np.array(model.log_likelihood)
        assert (np.diff(ll) >= -1e-8 * np.abs(ll[:-1]).clip(1)).all()
        np.testing.assert_allclose(resp.sum(axis=1), 1.0, atol=1e-9)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            A.gmm_fit(np.zeros((2, 2)), n_components=3)


class TestProbe:
    def test_separable(self):
        rng = np.random.default_rng(0)
        x = np.vstack([rng.normal(-3, 0.3, (10, 2)), rng.normal(3, 0.3, (10, 2))])
        y = [0] * 10 + [1] * 10
        assert A.logistic_probe_loo(x, y).accuracy == 1.0

    def test_constant_labels(self):
        rep = A.logistic_probe_loo(np.random.default_rng(0).normal(size=(8, 2)), [3] * 8)
        assert rep.accuracy == rep.majority == 1.0

    def test_shuffled_labels_near_majority(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(40, 4))
        accs = [A.logistic_probe_loo(x, rng.permutation([0] * 30 + [1] * 10)).accuracy
                for _ in range(10)]
        noise = 2 * np.sqrt(0.75 * 0.25 / 40)
        assert abs(np.mean(accs) - 0.75) <= noise

    def test_majority(self):
        assert A.majority_baseline([0, 0, 1]) == pytest.approx(2 / 3)
        assert A.majority_baseline([4, 4]) == 1.0
        assert A.majority_baseline([0, 1]) == 0.5
        assert A.majority_baseline([1] * 7 + [0] * 3) == 0.7


class TestRidge:
    def test_one_dimensional(self):
        m = A.ridge_fit([[1.0], [2.0]], [[2.0], [4.0]], lam=0.0)
        assert abs(m.coef[0, 0] - 2.0) <= 1e-10 and abs(m.intercept[0]) <= 1e-10

    def test_interpolates_square_system(self):
        rng = np.random.default_rng(0)
        phi, z = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(A.ridge_fit(phi, z, 0.0).predict(phi), z, atol=1e-9)

    def test_huge_lambda_gives_means(self):
        rng = np.random.default_rng(1)
        phi, z = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
        pred = A.ridge_fit(phi, z, 1e12).predict(phi)
        np.testing.assert_allclose(pred, np.tile(z.mean(0), (6, 1)), atol=1e-9)

    def test_singular(self):
        with pytest.raises(A.SingularSystemError):
            A.ridge_fit(np.ones((4, 2)), np.ones((4, 1)), 0.0)

    def test_loo_prefers_signal(self):
        rng = np.random.default_rng(4)
        phi = rng.normal(size=(20, 3))
        z = phi @ rng.normal(size=(3, 2)) + 0.01 * rng.normal(size=(20, 2))
        rep = A.ridge_loo(phi, z)
        assert rep.mse < 0.1 * rep.mean_predictor_mse
        assert rep.lam in (0.01, 0.1, 1.0, 10.0)


class TestSameTypeMean:
    def test_single_task(self):
        s = space([[1.0, 2.0], [3.0, 4.0]], ["a", "b"], types=["NLI", "Emotion"])
        np.testing.assert_array_equal(A.same_type_mean(s, "NLI"), [1.0, 2.0])

    def test_opposites_cancel(self):
        s = space([[1.0, -2.0], [-1.0, 2.0]], ["a", "b"], types=["NLI", "NLI"])
        np.testing.assert_array_equal(A.same_type_mean(s, "NLI"), [0.0, 0.0])

    def test_exclusion(self):
        s = space([[1.0, 0.0]], ["a"], types=["NLI"])
        with pytest.raises(ValueError):
            A.same_type_mean(s, "NLI", exclude=["a"])


def test_space_rejects_duplicate_rows():
    with pytest.raises(ValueError):
        space(np.eye(2), ["a", "a"])
