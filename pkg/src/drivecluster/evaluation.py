"""Sibling augmentation, TP/FP metrics and rule-based grading vectors."""
from __future__ import annotations

import json
import logging
import zlib
from collections import Counter
from dataclasses import dataclass, field, fields
from typing import Mapping, Optional, Sequence as Seq

import numpy as np

from .clustering import kmeans, select_num_clusters, silhouette_score
from .data_model import Frame, LaneMap, Sequence
from .render import RasterConfig, SparseFrames, _points_in_polygon, decompose_velocity, to_ego_frame

log = logging.getLogger(__name__)

GRADING_NAMES = ("follow", "follow_in_junction", "collision_risk", "jerk",
                 "follow_slow", "yellow_light")


class AugmentationError(ValueError):
    pass


class MissingLabelError(KeyError):
    pass


@dataclass(frozen=True)
class SiblingGroup:
    origin: str
    derived_ids: tuple[str, ...]
    subsets: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.derived_ids) != len(self.subsets):
            raise AugmentationError("one index subset per derived id")
        seen: set[int] = set()
        for sub in self.subsets:
            if not sub:
                raise AugmentationError(f"{self.origin}: empty derived sequence")
            if list(sub) != sorted(sub) or len(set(sub)) != len(sub):
                raise AugmentationError(f"{self.origin}: subset not strictly increasing")
            if seen & set(sub):
                raise AugmentationError(f"{self.origin}: derived sequences share frames")
            seen |= set(sub)


def derived_id(origin: str, d: int) -> str:
    return f"{origin}#d{d}"


def augmentation_rng(seed: int, origin: str) -> np.random.Generator:
    # keyed on the id so a sequence's partition does not depend on its position
    return np.random.default_rng([seed % 2**32, zlib.crc32(origin.encode())])


def partition_indices(m: int, n_derived: int, rng: np.random.Generator) -> list[list[int]]:
    """Uniformly random split of ``range(m)`` into ``n_derived`` ordered subsets of near-equal size."""
    if n_derived < 1:
        raise AugmentationError("n_derived must be >= 1")
    if m < n_derived:
        raise AugmentationError(f"sequence of {m} frames cannot give {n_derived} disjoint siblings")
    perm = rng.permutation(m)
    return [sorted(perm[d::n_derived].tolist()) for d in range(n_derived)]


def augment_sequence(images, n_derived: int, seed: int, origin: str = "seq"):
    """Split a rendered sequence into disjoint siblings.

    ``images`` is a SparseFrames or anything indexable by frame. Returns the
    group and the list of derived image sequences.
    """
    m = len(images)
    subsets = partition_indices(m, n_derived, augmentation_rng(seed, origin))
    group = SiblingGroup(origin, tuple(derived_id(origin, d) for d in range(n_derived)),
                         tuple(tuple(s) for s in subsets))
    if isinstance(images, SparseFrames):
        derived = [images.subset(s) for s in subsets]
    else:
        arr = np.asarray(images)
        derived = [arr[s] for s in subsets]
    return group, derived


def _label_of(labels: Mapping[str, int], key: str):
    try:
        return labels[key]
    except KeyError:
        raise MissingLabelError(f"no cluster label for {key!r}") from None


def true_positive_rate(groups: Seq[SiblingGroup], labels: Mapping[str, int]) -> float:
    """Share of derived sequences whose whole sibling group landed in one cluster."""
    correct = total = 0
    for g in groups:
        lab = {_label_of(labels, d) for d in g.derived_ids}
        total += len(g.derived_ids)
        if len(lab) == 1:
            correct += len(g.derived_ids)
    if total == 0:
        raise ValueError("no derived sequences")
    return correct / total


def majority_grading(gradings: Seq[tuple]) -> tuple:
    counts = Counter(tuple(g) for g in gradings)
    top = max(counts.values())
    return min(g for g, c in counts.items() if c == top)


def false_positive_rate(labels: Mapping[str, int], gradings: Mapping[str, tuple]) -> float:
    """Share of sequences whose grading differs from their cluster's modal grading."""
    if not labels:
        raise ValueError("no labelled sequences")
    members: dict = {}
    for key, lab in labels.items():
        if key not in gradings:
            raise MissingLabelError(f"no grading for {key!r}")
        members.setdefault(lab, []).append(tuple(gradings[key]))
    wrong = 0
    for gs in members.values():
        major = majority_grading(gs)
        wrong += sum(g != major for g in gs)
    return wrong / len(labels)


def cluster_purity(labels: Mapping[str, int], truth: Mapping[str, str]) -> float:
    members: dict = {}
    for key, lab in labels.items():
        members.setdefault(lab, []).append(truth[key])
    hit = sum(Counter(v).most_common(1)[0][1] for v in members.values())
    return hit / len(labels)


# ---------------------------------------------------------------- grading rules


@dataclass(frozen=True)
class RuleConfig:
    follow_gap: tuple[float, float] = (2.0, 50.0)
    lane_half_width: float = 1.75
    follow_speed: tuple[float, float] = (1.0, 20.0)
    min_duration: float = 2.0
    ttc_threshold: float = 3.0
    jerk_threshold: float = 4.0
    slow_speed: float = 2.0
    ego_length: float = 4.8


def _agent_geometry(frame: Frame):
    """(centroid lon, centroid lat, nearest lon of the footprint, lon speed) per agent, ego frame."""
    out = []
    for a in frame.agents:
        poly = to_ego_frame(frame.ego, np.asarray(a.polygon))
        c = poly.mean(axis=0)
        v_lon, _ = decompose_velocity(frame.ego, a.velocity)
        out.append((c[0], c[1], poly[:, 0].min(), v_lon))
    return out


def _runs_long_enough(mask: np.ndarray, t: np.ndarray, duration: float) -> bool:
    start = None
    for k, on in enumerate(mask):
        if on and start is None:
            start = k
        if not on:
            start = None
        elif t[k] - t[start] >= duration - 1e-9:
            return True
    return False


def _in_junction(frame: Frame, lane_map: LaneMap) -> bool:
    x, y = np.float64(frame.ego.x), np.float64(frame.ego.y)
    return any(bool(_points_in_polygon(x, y, np.asarray(j))) for j in lane_map.junctions)


def compute_grading(seq: Sequence, lane_map: LaneMap, rules: RuleConfig = RuleConfig()) -> tuple[bool, ...]:
    frames = seq.frames
    t = np.array([f.timestamp for f in frames])
    speed = np.array([f.speed for f in frames])
    geo = [_agent_geometry(f) for f in frames]
    lo, hi = rules.follow_gap

    follow_geom = np.array([
        any(lo <= lon <= hi and abs(lat) < rules.lane_half_width for lon, lat, _, _ in g)
        for g in geo
    ], dtype=bool)
    follow = follow_geom & (speed >= rules.follow_speed[0]) & (speed <= rules.follow_speed[1])
    junction = np.array([_in_junction(f, lane_map) for f in frames], dtype=bool)

    ttc_min = np.inf
    for k, g in enumerate(geo):
        ahead = [x for x in g if x[0] > 0 and abs(x[1]) < rules.lane_half_width]
        if not ahead:
            continue
        # only the first vehicle in the lane can be hit
        lon, lat, front, v_lon = min(ahead, key=lambda x: x[2])
        closing = speed[k] - v_lon
        if closing > 0:
            ttc_min = min(ttc_min, max(front - rules.ego_length / 2, 0.0) / closing)

    jerk = False
    if len(frames) >= 3:
        acc = np.gradient(speed, t)
        jerk = bool(np.any(np.abs(np.gradient(acc, t)) > rules.jerk_threshold))

    entered = np.concatenate([[False], junction[1:] & ~junction[:-1]])
    yellow = np.array([f.traffic_light == "yellow" for f in frames], dtype=bool)

    return (
        _runs_long_enough(follow, t, rules.min_duration),
        _runs_long_enough(follow & junction, t, rules.min_duration),
        bool(ttc_min < rules.ttc_threshold),
        jerk,
        _runs_long_enough(follow_geom & (speed < rules.slow_speed), t, rules.min_duration),
        bool(np.any(entered & yellow)),
    )


# ---------------------------------------------------------------- report


@dataclass(frozen=True)
class EvalConfig:
    n_derived: int = 5
    seed: int = 0
    k: Optional[int] = None
    k_range: tuple[int, int] = (2, 12)
    n_init: int = 10
    rules: RuleConfig = field(default_factory=RuleConfig)


@dataclass
class EvaluationReport:
    tp: float
    fp: float
    k: int
    silhouette: float
    per_cluster: list
    n_base: int
    n_derived_total: int
    purity: Optional[float] = None
    k_table: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    # arrays kept for plots and feature files, not serialised
    derived_ids: list = field(default_factory=list, repr=False)
    features: Optional[np.ndarray] = field(default=None, repr=False)
    labels: Optional[np.ndarray] = field(default=None, repr=False)
    distances: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        skip = ("derived_ids", "features", "labels", "distances")
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in skip}
        if d["purity"] is None:
            del d["purity"]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def cluster_features(features: np.ndarray, cfg: EvalConfig):
    """(assignment, k table) with k fixed or chosen by silhouette."""
    if cfg.k is not None:
        return kmeans(features, cfg.k, seed=cfg.seed, n_init=cfg.n_init), []
    k_lo, k_hi = cfg.k_range
    k_hi = min(k_hi, len(features) - 1)
    best, table = select_num_clusters(features, k_lo, k_hi, seed=cfg.seed, n_init=cfg.n_init)
    return kmeans(features, best, seed=cfg.seed, n_init=cfg.n_init), table


def score_clustering(groups: Seq[SiblingGroup], cluster_ids, gradings: Mapping[str, tuple],
                     silhouette: float, truth: Optional[Mapping[str, str]] = None,
                     features: Optional[np.ndarray] = None, k_table: Optional[list] = None,
                     config_echo: Optional[dict] = None) -> EvaluationReport:
    """Report for a labelling of the derived sequences (rows in sibling-group order)."""
    ids = [d for g in groups for d in g.derived_ids]
    cluster_ids = np.asarray(cluster_ids)
    if len(ids) != len(cluster_ids):
        raise ValueError(f"{len(cluster_ids)} labels for {len(ids)} derived sequences")
    labels = {d: int(c) for d, c in zip(ids, cluster_ids)}
    k = int(cluster_ids.max()) + 1 if len(cluster_ids) else 0

    derived_truth = None
    if truth is not None:
        derived_truth = {d: truth[g.origin] for g in groups for d in g.derived_ids}

    per_cluster = []
    for c in range(k):
        members = [d for d in ids if labels[d] == c]
        row = {"cluster": c, "size": len(members)}
        if members:
            row["majority_grading"] = list(majority_grading([gradings[d] for d in members]))
            if derived_truth is not None:
                top, n = Counter(derived_truth[d] for d in members).most_common(1)[0]
                row["majority_template"] = top
                row["purity"] = n / len(members)
        per_cluster.append(row)

    return EvaluationReport(
        tp=true_positive_rate(groups, labels),
        fp=false_positive_rate(labels, gradings),
        k=k,
        silhouette=float(silhouette),
        per_cluster=per_cluster,
        n_base=len(groups),
        n_derived_total=len(ids),
        purity=cluster_purity(labels, derived_truth) if derived_truth is not None else None,
        k_table=k_table or [],
        config=config_echo or {},
        derived_ids=ids,
        features=None if features is None else np.asarray(features, dtype=np.float32),
        labels=cluster_ids,
    )


def evaluate_features(groups: Seq[SiblingGroup], features: np.ndarray,
                      gradings: Mapping[str, tuple], cfg: EvalConfig,
                      truth: Optional[Mapping[str, str]] = None,
                      config_echo: Optional[dict] = None) -> EvaluationReport:
    """Cluster derived-sequence features and score them."""
    n = sum(len(g.derived_ids) for g in groups)
    if n != len(features):
        raise ValueError(f"{len(features)} feature rows for {n} derived sequences")
    assign, table = cluster_features(np.asarray(features, dtype=np.float64), cfg)
    sil = silhouette_score(features, assign.labels) if len(set(assign.labels.tolist())) > 1 else 0.0
    return score_clustering(groups, assign.labels, gradings, sil, truth, features, table, config_echo)


def derive_gradings(dataset, groups: Seq[SiblingGroup], rules: RuleConfig) -> dict:
    # siblings inherit the grading of their origin sequence
    out, lookup = {}, dataset.by_id()
    for g in groups:
        seq = lookup[g.origin]
        grade = compute_grading(seq, dataset.map_for(seq), rules)
        for d in g.derived_ids:
            out[d] = grade
    return out


def evaluate_pipeline(dataset, frame_model, seq_model, raster_cfg: RasterConfig,
                      eval_cfg: EvalConfig, truth: Optional[Mapping[str, str]] = None,
                      images: Optional[Seq[SparseFrames]] = None,
                      config_echo: Optional[dict] = None) -> EvaluationReport:
    """Render, augment, encode and cluster ``dataset``; ``seq_model=None`` averages frame features."""
    from .frame_codec import encode_frames
    from .render import render_sequence_sparse
    from .sequence_codec import average_features, encode_sequences

    seqs = dataset.sequences
    if images is None:
        images = [render_sequence_sparse(s, dataset.map_for(s), raster_cfg) for s in seqs]
    groups, steps = [], []
    for seq, img in zip(seqs, images):
        group, _ = augment_sequence(img, eval_cfg.n_derived, eval_cfg.seed, seq.id)
        z = encode_frames(frame_model, img)
        groups.append(group)
        steps.extend(z[list(sub)] for sub in group.subsets)
    gradings = derive_gradings(dataset, groups, eval_cfg.rules)
    if seq_model is None:
        feats = np.stack([average_features(s) for s in steps])
    else:
        feats = encode_sequences(seq_model, steps)
    log.info("encoded %d derived sequences from %d originals", len(steps), len(groups))
    return evaluate_features(groups, feats, gradings, eval_cfg, truth, config_echo)
