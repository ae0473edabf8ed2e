import numpy as np
import pytest

from pamt.errors import DataError, ShapeMismatchError
from pamt.kmeans import (
    Centroids,
    PrototypeKMeans,
    assign,
    assign_many,
    kmeans_fit,
    squared_distances,
)
from pamt.rng import derive_rng


def lloyd_oracle(X, c, seed, max_iter=100, tol=1e-6):
    """Independent plain-loop Lloyd with the same documented seeding calls."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    rng = derive_rng(seed, "kmeans")
    mu = np.empty((c, X.shape[1]))
    mu[0] = X[int(rng.integers(n))]
    for k in range(1, c):
        d2 = np.empty((n, k))
        for j in range(k):
            d2[:, j] = ((X - mu[j]) ** 2).sum(axis=1)
        best = d2.min(axis=1)
        total = best.sum()
        if total == 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=best / total))
        mu[k] = X[idx]

    for _ in range(max_iter):
        d2 = np.empty((n, c))
        for j in range(c):
            d2[:, j] = ((X - mu[j]) ** 2).sum(axis=1)
        labels = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), labels]
        new_mu = mu.copy()
        for j in range(c):
            members = labels == j
            if members.any():
                new_mu[j] = X[members].mean(axis=0)
        counts = np.bincount(labels, minlength=c)
        pool = point_d2.copy()
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(pool))
            new_mu[j] = X[far]
            pool[far] = -1.0
        shift = 0.0
        for j in range(c):
            shift = max(shift, float(np.sqrt(((new_mu[j] - mu[j]) ** 2).sum())))
        mu = new_mu
        if shift < tol:
            break
    d2 = np.empty((n, c))
    for j in range(c):
        d2[:, j] = ((X - mu[j]) ** 2).sum(axis=1)
    return mu, d2.argmin(axis=1)


class TestFit:
    def test_each_point_its_own_cluster(self):
        X = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        centroids, labels, trace = kmeans_fit(X, 3, seed=0)
        assert sorted(map(tuple, centroids.mu)) == sorted(map(tuple, X))
        assert trace[-1] == 0.0
        assert len(set(labels.tolist())) == 3

    def test_four_point_example(self):
        X = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
        centroids, _, _ = kmeans_fit(X, 2, seed=3)
        got = sorted(map(tuple, centroids.mu))
        np.testing.assert_allclose(got, [(0.0, 0.5), (10.0, 0.5)], atol=1e-12)

    def test_same_seed_bit_identical(self):
        X = np.random.default_rng(1).normal(size=(40, 3))
        a, la, ta = kmeans_fit(X, 4, seed=9)
        b, lb, tb = kmeans_fit(X, 4, seed=9)
        assert a.mu.tobytes() == b.mu.tobytes()
        assert np.array_equal(la, lb)
        assert ta == tb

    def test_too_few_points(self):
        with pytest.raises(DataError):
            kmeans_fit(np.zeros((2, 2)), 3, seed=0)

    def test_sse_trace_non_increasing(self):
        X = np.random.default_rng(2).normal(size=(120, 4))
        _, _, trace = kmeans_fit(X, 5, seed=5)
        assert all(a >= b - 1e-9 for a, b in zip(trace, trace[1:]))

    def test_centroids_are_member_means(self):
        X = np.random.default_rng(3).normal(size=(80, 3))
        centroids, labels, _ = kmeans_fit(X, 3, seed=7, tol=1e-12)
        for c in range(3):
            members = X[labels == c]
            assert members.size > 0
            np.testing.assert_allclose(centroids.mu[c], members.mean(axis=0), atol=1e-9)

    def test_fitted_centroids_distinct(self):
        X = np.random.default_rng(4).normal(size=(60, 2))
        centroids, _, _ = kmeans_fit(X, 4, seed=11)
        d2 = squared_distances(centroids.mu, centroids.mu)
        off_diag = d2[~np.eye(4, dtype=bool)]
        assert off_diag.min() > 1e-18

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_independent_lloyd(self, seed):
        rng = np.random.default_rng(100 + seed)
        n, d, c = int(rng.integers(10, 120)), int(rng.integers(2, 6)), int(rng.integers(2, 5))
        X = rng.normal(size=(n, d)) * rng.uniform(0.5, 3.0)
        centroids, labels, _ = kmeans_fit(X, c, seed=seed)
        mu_o, labels_o = lloyd_oracle(X, c, seed)
        np.testing.assert_allclose(centroids.mu, mu_o, atol=1e-9)
        assert np.array_equal(labels, labels_o)

    def test_duplicate_points_still_terminate(self):
        X = np.repeat(np.array([[0.0, 0.0], [1.0, 1.0]]), 5, axis=0)
        centroids, labels, _ = kmeans_fit(X, 2, seed=0, max_iter=20)
        assert centroids.mu.shape == (2, 2)
        assert labels.shape == (10,)


class TestAssign:
    CENTROIDS = Centroids(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]))

    def test_exact_centroid_match(self):
        assert assign(np.array([0.0, 2.0]), self.CENTROIDS) == 2

    def test_distance_comparison(self):
        two = Centroids(np.array([[0.0, 0.0], [2.0, 0.0]]))
        assert assign(np.array([0.4, 0.0]), two) == 0

    def test_tie_goes_to_lowest_index(self):
        two = Centroids(np.array([[0.0, 0.0], [2.0, 0.0]]))
        assert assign(np.array([1.0, 0.0]), two) == 0

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            assign(np.zeros(3), self.CENTROIDS)

    def test_permuting_centroids_permutes_labels(self):
        rng = np.random.default_rng(5)
        mu = rng.normal(size=(4, 3))
        X = rng.normal(size=(30, 3))
        perm = np.array([2, 0, 3, 1])
        base, _ = assign_many(X, Centroids(mu))
        permuted, _ = assign_many(X, Centroids(mu[perm]))
        # label j under permuted centroids refers to original cluster perm[j]
        assert np.array_equal(perm[permuted], base)

    def test_assign_many_matches_scalar_assign(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(20, 2))
        labels, dists = assign_many(X, self.CENTROIDS)
        for i in range(20):
            assert labels[i] == assign(X[i], self.CENTROIDS)
        assert np.all(dists >= 0.0)


class TestEstimator:
    def test_fit_predict_transform(self):
        X = np.random.default_rng(7).normal(size=(50, 3))
        km = PrototypeKMeans(n_clusters=3, seed=1).fit(X)
        assert km.cluster_centers_.shape == (3, 3)
        assert km.labels_.shape == (50,)
        assert km.inertia_ == km.sse_trace_[-1]
        pred = km.predict(X)
        assert np.array_equal(pred, km.labels_)
        dists = km.transform(X)
        assert dists.shape == (50, 3)
        assert np.array_equal(dists.argmin(axis=1), pred)

    def test_get_params_round_trip(self):
        km = PrototypeKMeans(n_clusters=5, seed=2, max_iter=10, tol=1e-3)
        params = km.get_params()
        assert params["n_clusters"] == 5
        clone = PrototypeKMeans(**params)
        assert clone.get_params() == params

    def test_unfitted_predict_rejected(self):
        with pytest.raises(DataError):
            PrototypeKMeans().predict(np.zeros((2, 2)))
