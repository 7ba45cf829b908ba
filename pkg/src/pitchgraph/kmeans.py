"""Lloyd's k-means with k-means++ seeding, deterministic given a seed.

Shared by the team-clustering step (histograms), fixed-region detection
(2-d flow vectors) and field segmentation (RGB pixels).
"""

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from .errors import ContractError
from .validation import as_float_array, check_fitted


def kmeans_plusplus_init(X, n_clusters, rng):
    """k-means++ seeding: D^2-weighted sampling of initial centers."""
    n = X.shape[0]
    centers = np.empty((n_clusters, X.shape[1]), dtype=X.dtype)
    centers[0] = X[rng.integers(n)]
    dist_sq = np.sum((X - centers[0]) ** 2, axis=1)
    for k in range(1, n_clusters):
        total = dist_sq.sum()
        if total <= 0:
            # all remaining points coincide with a chosen center
            centers[k] = X[rng.integers(n)]
            continue
        probs = dist_sq / total
        idx = rng.choice(n, p=probs)
        centers[k] = X[idx]
        dist_sq = np.minimum(dist_sq, np.sum((X - centers[k]) ** 2, axis=1))
    return centers


def lloyd_kmeans(X, n_clusters, seed, max_iter=300):
    """Full-batch Lloyd iterations until assignments stabilize.

    Returns (centers, labels, inertia).  Empty clusters keep their previous
    center so the output always has n_clusters rows.
    """
    X = as_float_array(X, "X", ndim=2)
    n = X.shape[0]
    if n_clusters < 1:
        raise ContractError("n_clusters must be >= 1")
    if n_clusters > n:
        raise ContractError(f"n_clusters = {n_clusters} exceeds sample count {n}")
    rng = np.random.default_rng(seed)
    centers = kmeans_plusplus_init(X, n_clusters, rng)
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for k in range(n_clusters):
            members = X[labels == k]
            if len(members):
                centers[k] = members.mean(axis=0)
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    inertia = float(d2[np.arange(n), labels].sum())
    return centers, labels, inertia


class KMeans(BaseEstimator, ClusterMixin):
    """Thin estimator wrapper around :func:`lloyd_kmeans`."""

    def __init__(self, n_clusters=8, seed=0, max_iter=300):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter

    def fit(self, X, y=None):
        centers, labels, inertia = lloyd_kmeans(X, self.n_clusters, self.seed, self.max_iter)
        self.cluster_centers_ = centers
        self.labels_ = labels
        self.inertia_ = inertia
        return self

    def predict(self, X):
        check_fitted(self, "cluster_centers_")
        X = as_float_array(X, "X", ndim=2)
        d2 = ((X[:, None, :] - self.cluster_centers_[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)
