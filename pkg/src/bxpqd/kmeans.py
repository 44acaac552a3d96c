"""Lloyd's k-means with k-means++ seeding, deterministic given a seed."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


@dataclass
class KMeansResult:
    assignment: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(X, C):
    # |x|^2 - 2 x.c + |c|^2, clipped against tiny negative rounding
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(X, k, rng) -> np.ndarray:
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[centers])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a chosen centre; pick unused indices in order
            idx = next(i for i in range(n) if i not in centers)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(idx)
        d2 = np.minimum(d2, _sq_dists(X, X[idx : idx + 1])[:, 0])
    return X[centers].copy()


def kmeans(X, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6) -> KMeansResult:
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if not 1 <= k <= n:
        raise ConfigurationError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    C = kmeans_pp_init(X, k, rng)
    d = _sq_dists(X, C)
    assign = d.argmin(1)
    history = [float(d[np.arange(n), assign].sum())]
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(k):
            members = assign == j
            if members.any():
                C[j] = X[members].mean(0)
            else:
                # re-seed an empty cluster at the point farthest from its centre
                far = int(d[np.arange(n), assign].argmax())
                C[j] = X[far]
        d = _sq_dists(X, C)
        assign = d.argmin(1)
        history.append(float(d[np.arange(n), assign].sum()))
        if history[-2] - history[-1] <= tol * max(history[-2], 1e-300):
            break
    # final centroids are exact member means of the final assignment
    for j in range(k):
        if (assign == j).any():
            C[j] = X[assign == j].mean(0)
    inertia = float(((X - C[assign]) ** 2).sum())
    return KMeansResult(assign, C, inertia, history, it)
