"""Seeded Lloyd's k-means with k-means++ init, shared by the weight codebook
quantizer and the solution-pool diversification step."""
from __future__ import annotations

import numpy as np


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iters: int = 100, rel_tol: float = 1e-6):
    """Cluster (n, d) points; returns (centroids, labels, sse_history).

    SSE is non-increasing over iterations; stops at max_iters or when the
    relative SSE change drops below rel_tol.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = len(pts)
    k = min(k, n)
    # k-means++ seeding
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(n)]
    d2 = np.sum((pts - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j:] = centroids[0]
            break
        centroids[j] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((pts - centroids[j]) ** 2, axis=1))

    sse_history = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        dists = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        sse = float(dists[np.arange(n), labels].sum())
        for j in range(k):
            members = pts[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        sse_history.append(sse)
        if len(sse_history) > 1 and sse_history[-2] - sse <= rel_tol * max(sse_history[-2], 1e-30):
            break
    # final assignment against the updated centroids
    dists = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = dists.argmin(axis=1)
    return centroids, labels, sse_history
