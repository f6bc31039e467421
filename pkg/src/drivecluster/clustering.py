"""K-means with k-means++ seeding and silhouette-based choice of k."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    k: int
    seed: int
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x ** 2).sum(1)[:, None] - 2 * x @ c.T + (c ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centre
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(x, centers, max_iter, tol):
    k = len(centers)
    history = []
    labels = None
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        labels = d2.argmin(1)
        # repair empty clusters with the points farthest from their centroid
        counts = np.bincount(labels, minlength=k)
        if np.any(counts == 0):
            own = d2[np.arange(len(x)), labels]
            for c in np.flatnonzero(counts == 0):
                counts = np.bincount(labels, minlength=k)
                movable = np.flatnonzero(counts[labels] > 1)
                far = movable[np.argmax(own[movable])]
                labels[far] = c
                own[far] = 0.0
        history.append(float(_sq_dists(x, centers)[np.arange(len(x)), labels].sum()))
        new = np.array([x[labels == c].mean(0) for c in range(k)])
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = new
        if shift < tol:
            break
    inertia = float(_sq_dists(x, centers)[np.arange(len(x)), labels].sum())
    history.append(inertia)
    return labels, centers, inertia, n_iter, history


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, n_init: int = 10,
           tol: float = 1e-6) -> ClusterAssignment:
    """Lloyd's algorithm, best of ``n_init`` k-means++ restarts by inertia."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must be an (N, d) array")
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, N={n}]")
    if not np.all(np.isfinite(x)):
        raise ValueError("points contain non-finite values")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, centers, inertia, n_iter, hist = _lloyd(x, _kmeans_pp(x, k, rng), max_iter, tol)
        if best is None or inertia < best.inertia:
            best = ClusterAssignment(labels, centers, inertia, k, seed, n_iter, hist)
    return best


def _silhouette_from_sums(sums: np.ndarray, lab: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    n = len(lab)
    own = sizes[lab]
    a = np.where(own > 1, sums[np.arange(n), lab] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(n), lab] = np.inf
    b = mean_other.min(1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(own > 1, s, 0.0)


def _onehot(labels):
    uniq, lab = np.unique(np.asarray(labels), return_inverse=True)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    onehot = np.zeros((len(lab), len(uniq)))
    onehot[np.arange(len(lab)), lab] = 1.0
    return lab, onehot


def silhouette_samples(points, labels) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    lab, onehot = _onehot(labels)
    n = len(x)
    sums = np.zeros(onehot.shape)
    sq = (x ** 2).sum(1)
    for s in range(0, n, 1024):
        d = np.sqrt(np.maximum(sq[s:s + 1024, None] + sq[None, :] - 2 * x[s:s + 1024] @ x.T, 0.0))
        d[np.arange(d.shape[0]), np.arange(s, s + d.shape[0])] = 0.0
        sums[s:s + 1024] = d @ onehot
    return _silhouette_from_sums(sums, lab, onehot.sum(0))


def silhouette_precomputed(dist, labels) -> float:
    """Mean silhouette from a full distance matrix."""
    d = np.asarray(dist, dtype=np.float64)
    lab, onehot = _onehot(labels)
    return float(_silhouette_from_sums(d @ onehot, lab, onehot.sum(0)).mean())


def silhouette_score(points, labels) -> float:
    return float(silhouette_samples(points, labels).mean())


def select_num_clusters(points, k_min: int, k_max: int, seed: int = 0,
                        n_init: int = 10) -> tuple[int, list[dict]]:
    """k in [k_min, k_max] with the best silhouette; ties go to the smaller k."""
    n = len(points)
    if not 2 <= k_min <= k_max < n:
        raise ValueError(f"need 2 <= k_min <= k_max < N, got [{k_min}, {k_max}] with N={n}")
    table = []
    best_k, best_s = None, -np.inf
    for k in range(k_min, k_max + 1):
        res = kmeans(points, k, seed=seed, n_init=n_init)
        s = silhouette_score(points, res.labels) if len(np.unique(res.labels)) > 1 else -1.0
        table.append({"k": k, "silhouette": s, "inertia": res.inertia})
        if s > best_s:
            best_k, best_s = k, s
    return best_k, table
