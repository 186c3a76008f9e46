"""Small deterministic k-means (seeded k-means++ init, Lloyd iterations).

Deliberately dependency-free and single-threaded: cluster labels feed the
exemplar draws of synthetic query generation, and whole-pipeline runs must be
bit-reproducible regardless of thread pools or BLAS backends.
"""

from __future__ import annotations

import numpy as np


def kmeans(points: np.ndarray, n_clusters: int, seed: int = 0,
           max_iter: int = 50) -> np.ndarray:
    """Cluster rows of ``points`` into ``n_clusters``; returns integer labels.

    Ties in the nearest-centroid assignment go to the lowest cluster index.
    """
    n = points.shape[0]
    if not (1 <= n_clusters <= n):
        raise ValueError("need 1 <= n_clusters <= n_points")
    if n_clusters == 1:
        return np.zeros(n, dtype=np.int64)

    rng = np.random.default_rng(seed)
    centers = _plusplus_init(points, n_clusters, rng)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)  # argmin takes the first minimum
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
        for c in range(n_clusters):
            members = points[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return labels


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # remaining points coincide with chosen centers; pick by index
            centers[i] = points[i % n]
            continue
        probs = d2 / total
        centers[i] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    return centers
