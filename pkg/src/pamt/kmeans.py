"""Prototype discovery: k-means with k-means++ seeding and Lloyd refinement.

The fitting procedure is deliberately pinned down so an independently written
Lloyd loop can replicate it bit-for-bit given the same seed:

* generator: ``derive_rng(seed, "kmeans")``
* first centroid: index ``rng.integers(n)``
* each further centroid: ``d2`` = squared Euclidean distance of every point
  to its nearest chosen centroid; if ``d2.sum() == 0`` the index is
  ``rng.integers(n)``, otherwise ``rng.choice(n, p=d2 / d2.sum())``
* Lloyd: assign to nearest centroid (ties: lowest index), recompute means,
  stop when the largest centroid movement is below ``tol`` or after
  ``max_iter`` assignments
* empty cluster: in ascending cluster order, move its centroid onto the
  not-yet-claimed point farthest from its assigned centroid (ties: lowest
  point index); the point keeps its old membership for this iteration's
  means

Squared distances are computed as ``((x - mu) ** 2).sum(axis=-1)`` with no
algebraic shortcut, so equal inputs give equal floats in any faithful
re-implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from .errors import ConfigError, DataError, PamtError, ShapeMismatchError
from .rng import derive_rng
from .validation import check_features_2d, check_fitted


@dataclass(frozen=True)
class Centroids:
    """Fitted cluster centers, row ``c`` holding mu_c."""

    mu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))
        if self.mu.ndim != 2 or self.mu.shape[0] < 1:
            raise ShapeMismatchError("centroids", self.mu.shape, detail="expected (C, D)")

    @property
    def n_clusters(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]


def squared_distances(X: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """(N, C) squared Euclidean distances by direct subtraction."""
    return ((X[:, None, :] - mu[None, :, :]) ** 2).sum(axis=-1)


def _plus_plus_seed(X: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((c, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    for k in range(1, c):
        d2 = squared_distances(X, centers[:k]).min(axis=1)
        total = d2.sum()
        if total == 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[k] = X[idx]
    return centers


def _fill_empty(X: np.ndarray, mu: np.ndarray, labels: np.ndarray,
                point_d2: np.ndarray) -> None:
    """Re-seed empty clusters onto faraway points, in place."""
    counts = np.bincount(labels, minlength=mu.shape[0])
    if counts.min() > 0:
        return
    d2 = point_d2.copy()
    for c in np.flatnonzero(counts == 0):
        j = int(np.argmax(d2))
        mu[c] = X[j]
        d2[j] = -1.0  # a point re-seeds at most one cluster


def kmeans_fit(features, n_clusters: int, seed: int, max_iter: int = 100,
               tol: float = 1e-6) -> tuple[Centroids, np.ndarray, list[float]]:
    """Fit centroids; returns (centroids, labels, per-iteration SSE trace).

    SSE is measured after each assignment step and asserted non-increasing.
    The returned labels are the nearest-centroid assignment under the final
    centroids (one extra assignment after the loop ends).
    """
    X = check_features_2d(features, "features")
    n = X.shape[0]
    if n_clusters < 1:
        raise ConfigError("n_clusters must be positive")
    if n < n_clusters:
        raise DataError(f"need at least {n_clusters} points, got {n}")
    if max_iter < 1 or tol < 0:
        raise ConfigError("max_iter must be positive and tol non-negative")

    rng = derive_rng(seed, "kmeans")
    mu = _plus_plus_seed(X, n_clusters, rng)
    labels = np.zeros(n, dtype=np.int64)
    sse_trace: list[float] = []
    for _ in range(max_iter):
        d2 = squared_distances(X, mu)
        labels = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), labels]
        sse = float(point_d2.sum())
        if sse_trace and sse > sse_trace[-1] + 1e-9 * max(1.0, sse_trace[-1]):
            raise PamtError(f"SSE increased during refinement: {sse_trace[-1]} -> {sse}")
        sse_trace.append(sse)

        new_mu = mu.copy()
        for c in range(n_clusters):
            members = labels == c
            if members.any():
                new_mu[c] = X[members].mean(axis=0)
        _fill_empty(X, new_mu, labels, point_d2)

        shift = float(np.sqrt(((new_mu - mu) ** 2).sum(axis=1)).max())
        mu = new_mu
        if shift < tol:
            break
    d2 = squared_distances(X, mu)
    labels = d2.argmin(axis=1)
    return Centroids(mu), labels.astype(np.int64), sse_trace


def assign(feature, centroids: Centroids) -> int:
    """Index of the nearest centroid; ties go to the lowest index."""
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim != 1 or f.shape[0] != centroids.dim:
        raise ShapeMismatchError("assign", f.shape, centroids.mu.shape)
    d2 = ((f[None, :] - centroids.mu) ** 2).sum(axis=-1)
    return int(d2.argmin())


def assign_many(features, centroids: Centroids) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized assignment; returns (cluster ids, distances to them)."""
    X = check_features_2d(features, "features")
    if X.shape[1] != centroids.dim:
        raise ShapeMismatchError("assign", X.shape, centroids.mu.shape)
    d2 = squared_distances(X, centroids.mu)
    labels = d2.argmin(axis=1)
    return labels.astype(np.int64), np.sqrt(d2[np.arange(X.shape[0]), labels])


class PrototypeKMeans(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`kmeans_fit`.

    Attributes after ``fit``: ``cluster_centers_``, ``labels_``,
    ``inertia_`` (final SSE), ``sse_trace_``, ``n_iter_``.
    """

    def __init__(self, n_clusters: int = 4, seed: int = 0, max_iter: int = 100,
                 tol: float = 1e-6):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        centroids, labels, trace = kmeans_fit(X, self.n_clusters, self.seed,
                                              max_iter=self.max_iter, tol=self.tol)
        self.cluster_centers_ = centroids.mu
        self.labels_ = labels
        self.sse_trace_ = trace
        self.inertia_ = trace[-1]
        self.n_iter_ = len(trace)
        return self

    def _centroids(self) -> Centroids:
        check_fitted(self, "cluster_centers_")
        return Centroids(self.cluster_centers_)

    def predict(self, X) -> np.ndarray:
        labels, _ = assign_many(X, self._centroids())
        return labels

    def transform(self, X) -> np.ndarray:
        """Distances to every centroid, shape (n_samples, n_clusters)."""
        c = self._centroids()
        X = check_features_2d(X, "X")
        if X.shape[1] != c.dim:
            raise ShapeMismatchError("transform", X.shape, c.mu.shape)
        return np.sqrt(squared_distances(X, c.mu))
