"""Handcrafted-feature benchmark: speed/gap series, PCA, DTW distances, k-medoids."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numba
import numpy as np

from .data_model import Frame, Sequence
from .render import to_ego_frame

log = logging.getLogger(__name__)

DEFAULT_N_MAX = 200


class BaselineScaleError(RuntimeError):
    pass


@dataclass(frozen=True)
class BaselineConfig:
    extent: float = 100.0
    k: int = 6
    n_components: int = 2
    n_max: int = DEFAULT_N_MAX
    seed: int = 0
    standardize: bool = True


def frame_features(frame: Frame, extent: float = 100.0) -> np.ndarray:
    """[ego speed, nearest agent centroid distance (capped), agents inside the square]."""
    half = extent / 2
    gap, count = half, 0
    for a in frame.agents:
        c = to_ego_frame(frame.ego, np.asarray(a.polygon).mean(axis=0))
        gap = min(gap, float(np.hypot(c[0], c[1])))
        count += int(abs(c[0]) <= half and abs(c[1]) <= half)
    return np.array([frame.speed, gap, count], dtype=np.float64)


def handcrafted_features(seq: Sequence, extent: float = 100.0) -> np.ndarray:
    return np.stack([frame_features(f, extent) for f in seq.frames])


@dataclass
class PCAModel:
    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray  # (n_components, dim), orthonormal rows
    explained_ratio: np.ndarray

    def transform(self, x) -> np.ndarray:
        return ((np.asarray(x) - self.mean) / self.scale) @ self.components.T

    def inverse(self, y) -> np.ndarray:
        return np.asarray(y) @ self.components * self.scale + self.mean


def pca_fit(series: list[np.ndarray], n_components: int, standardize: bool = False) -> PCAModel:
    x = np.concatenate([np.asarray(s, dtype=np.float64) for s in series])
    dim = x.shape[1]
    if not 1 <= n_components <= dim:
        raise ValueError(f"n_components={n_components} must lie in [1, {dim}]")
    mean = x.mean(0)
    xc = x - mean
    scale = np.ones(dim)
    if standardize:
        std = xc.std(0)
        scale = np.where(std > 0, std, 1.0)
        xc = xc / scale
    total = float((xc ** 2).sum())
    if total <= 0:
        raise ValueError("degenerate input: zero variance")
    _, sv, vt = np.linalg.svd(xc, full_matrices=False)
    # fix sign so the largest loading of each component is positive
    signs = np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(1)])
    vt = vt * signs[:, None]
    ratio = sv ** 2 / total
    return PCAModel(mean, scale, vt[:n_components], ratio[:n_components])


def pca_fit_transform(series: list[np.ndarray], n_components: int,
                      standardize: bool = False) -> tuple[list[np.ndarray], np.ndarray]:
    model = pca_fit(series, n_components, standardize)
    return [model.transform(s) for s in series], model.explained_ratio


@numba.njit(cache=True)
def _dtw(a, b):
    n, m = a.shape[0], b.shape[0]
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d = 0.0
            for c in range(a.shape[1]):
                diff = a[i - 1, c] - b[j - 1, c]
                d += diff * diff
            best = min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
            acc[i, j] = np.sqrt(d) + best
    return acc[n, m]


def _as_series(a) -> np.ndarray:
    x = np.asarray(a, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError("DTW needs non-empty series")
    return np.ascontiguousarray(x)


def dtw_distance(a, b) -> float:
    """Accumulated Euclidean step cost of the best monotone alignment, no window."""
    return float(_dtw(_as_series(a), _as_series(b)))


@numba.njit(parallel=True, cache=True)
def _dtw_pairs(flat, offsets, pairs, out):
    for p in numba.prange(pairs.shape[0]):
        i, j = pairs[p, 0], pairs[p, 1]
        out[p] = _dtw(flat[offsets[i]:offsets[i + 1]], flat[offsets[j]:offsets[j + 1]])


def dtw_matrix(series: list[np.ndarray]) -> np.ndarray:
    xs = [_as_series(s) for s in series]
    n = len(xs)
    offsets = np.concatenate([[0], np.cumsum([len(x) for x in xs])]).astype(np.int64)
    flat = np.ascontiguousarray(np.concatenate(xs)) if xs else np.zeros((0, 1))
    iu = np.triu_indices(n, 1)
    pairs = np.stack(iu, axis=1).astype(np.int64)
    vals = np.zeros(len(pairs))
    if len(pairs):
        _dtw_pairs(flat, offsets, pairs, vals)
    d = np.zeros((n, n))
    d[iu] = vals
    return d + d.T


def k_medoids(dist, k: int, seed: int = 0, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """PAM on a distance matrix: greedy BUILD then best-improvement SWAP. Returns (labels, medoids)."""
    d = np.asarray(dist, dtype=np.float64)
    n = len(d)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, N={n}]")
    rng = np.random.default_rng(seed)
    # random tie-break order; BUILD is otherwise deterministic
    order = rng.permutation(n)
    medoids = [int(order[np.argmin(d[order].sum(1))])]
    nearest = d[medoids[0]].copy()
    while len(medoids) < k:
        gain = np.maximum(nearest[None, :] - d, 0.0).sum(1)
        gain[medoids] = -1.0
        medoids.append(int(order[np.argmax(gain[order])]))
        nearest = np.minimum(nearest, d[medoids[-1]])

    def cost(meds):
        return d[meds].min(0).sum()

    best = cost(medoids)
    for _ in range(max_iter):
        improved = None
        for mi in range(k):
            for h in order:
                if h in medoids:
                    continue
                trial = medoids.copy()
                trial[mi] = int(h)
                c = cost(trial)
                if c < best - 1e-12:
                    best, improved = c, trial
        if improved is None:
            break
        medoids = improved
    medoids = np.array(sorted(medoids))
    labels = d[medoids].argmin(0)
    return labels, medoids


def check_scale(n: int, n_max: int = DEFAULT_N_MAX) -> None:
    if n > n_max:
        raise BaselineScaleError(
            f"baseline does not scale: {n} sequences exceed N_max={n_max} "
            f"(DTW matrix needs {n * (n - 1) // 2} alignments)")


def baseline_cluster(series: list[np.ndarray], cfg: BaselineConfig = BaselineConfig()):
    """Cluster per-frame feature series; returns (labels, distance matrix, explained ratios)."""
    check_scale(len(series), cfg.n_max)
    compressed, ratio = pca_fit_transform(series, cfg.n_components, cfg.standardize)
    dist = dtw_matrix(compressed)
    labels, _ = k_medoids(dist, cfg.k, cfg.seed)
    log.info("baseline: %d series, k=%d, explained %.3f", len(series), cfg.k, float(ratio.sum()))
    return labels, dist, ratio


def run_baseline(dataset, cfg: BaselineConfig, n_derived: int = 5, aug_seed: int = 0,
                 truth=None, rules=None):
    """Augment, featurise and cluster ``dataset`` with the benchmark; returns an EvaluationReport."""
    from dataclasses import asdict

    from .clustering import silhouette_precomputed
    from .evaluation import RuleConfig, augmentation_rng, derive_gradings, derived_id, \
        partition_indices, score_clustering, SiblingGroup

    n = len(dataset.sequences) * n_derived
    check_scale(n, cfg.n_max)
    groups, series = [], []
    for seq in dataset.sequences:
        feats = handcrafted_features(seq, cfg.extent)
        subsets = partition_indices(len(feats), n_derived, augmentation_rng(aug_seed, seq.id))
        groups.append(SiblingGroup(seq.id, tuple(derived_id(seq.id, d) for d in range(n_derived)),
                                   tuple(tuple(s) for s in subsets)))
        series.extend(feats[s] for s in subsets)
    labels, dist, ratio = baseline_cluster(series, cfg)
    gradings = derive_gradings(dataset, groups, rules or RuleConfig())
    sil = silhouette_precomputed(dist, labels) if len(set(labels.tolist())) > 1 else 0.0
    echo = {"method": "handcrafted+pca+dtw+k-medoids", **asdict(cfg),
            "n_derived": n_derived, "aug_seed": aug_seed,
            "explained_ratio": [float(r) for r in ratio]}
    report = score_clustering(groups, labels, gradings, sil, truth, None, None, echo)
    report.distances = dist
    return report
