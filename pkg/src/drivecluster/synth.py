"""Deterministic synthetic driving scenarios with template labels.

Every scenario is built in a canonical frame (ego starts at the origin heading
east) and then moved by a random rigid transform. Ego positions are forward
Euler integrals of (speed, heading); agent velocities are forward differences
of their centroid paths, so ``p[k+1] = p[k] + dt * v[k]`` holds for every step.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .data_model import AgentState, Dataset, Frame, LaneMap, Pose2D, Sequence, write_dataset

DT = 0.1
LANE_WIDTH = 3.5
VEHICLE_LENGTH = 4.8
VEHICLE_WIDTH = 1.8
TEMPLATE_NAMES = ("straight_follow", "stop_at_junction", "left_turn",
                  "right_turn", "overtake", "cut_in")
MAX_SPEED = 30.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioTemplate:
    name: str
    param_ranges: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in TEMPLATE_NAMES:
            raise ConfigError(f"unknown template {self.name!r}")
        ranges = dict(DEFAULT_RANGES[self.name])
        ranges.update({k: tuple(v) for k, v in self.param_ranges.items()})
        for key, (lo, hi) in ranges.items():
            if not lo <= hi:
                raise ConfigError(f"{self.name}.{key}: empty range [{lo}, {hi}]")
            if "speed" in key and not (0.0 <= lo and hi <= MAX_SPEED):
                raise ConfigError(f"{self.name}.{key}: speeds must lie in [0, {MAX_SPEED}] m/s")
        object.__setattr__(self, "param_ranges", ranges)


@dataclass(frozen=True)
class LabeledDataset:
    dataset: Dataset
    labels: dict[str, str]


# speeds m/s, gaps m, times s, frames count
DEFAULT_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "straight_follow": {
        "frames": (50, 150), "ego_speed": (11.0, 14.0), "speed_amp": (0.3, 1.0),
        "period": (6.0, 12.0), "gap": (15.0, 25.0), "gap_amp": (1.0, 3.0),
    },
    "stop_at_junction": {
        "frames": (75, 150), "ego_speed": (7.0, 8.5), "stop_time": (4.0, 5.0),
        "gap": (7.0, 10.0), "cross_speed": (8.0, 12.0), "headway": (2.0, 4.0),
    },
    "left_turn": {
        "frames": (50, 150), "ego_speed": (5.0, 6.5), "speed_amp": (0.0, 0.3),
        "period": (6.0, 12.0), "turn_start": (0.25, 0.45),
    },
    "right_turn": {
        "frames": (50, 150), "ego_speed": (8.0, 9.5), "speed_amp": (0.0, 0.3),
        "period": (6.0, 12.0), "turn_start": (0.25, 0.45),
    },
    "overtake": {
        "frames": (50, 150), "ego_speed": (16.0, 19.0), "speed_amp": (0.0, 0.5),
        "period": (6.0, 12.0), "speed_diff": (6.0, 9.0), "gap": (8.0, 20.0),
    },
    "cut_in": {
        "frames": (50, 150), "ego_speed": (11.0, 14.0), "speed_diff": (2.5, 3.5),
        "cut_start": (0.5, 1.0), "cut_duration": (1.5, 2.5), "cut_gap": (8.0, 9.5),
        "brake": (3.5, 4.5), "lead_speed_amp": (0.3, 0.8), "period": (3.0, 5.0),
    },
}


def default_templates() -> list[ScenarioTemplate]:
    return [ScenarioTemplate(n) for n in TEMPLATE_NAMES]


# ---------------------------------------------------------------- geometry helpers


def wrap_angle(a: float) -> float:
    w = math.remainder(a, 2 * math.pi)
    return math.pi if w <= -math.pi else w


def rectangle(cx: float, cy: float, heading: float,
              length: float = VEHICLE_LENGTH, width: float = VEHICLE_WIDTH) -> np.ndarray:
    """Counter-clockwise corners of a vehicle footprint."""
    c, s = math.cos(heading), math.sin(heading)
    local = np.array([[-length / 2, -width / 2], [length / 2, -width / 2],
                      [length / 2, width / 2], [-length / 2, width / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def integrate_ego(speed: np.ndarray, heading: np.ndarray) -> np.ndarray:
    """Forward-Euler positions from per-frame speed and heading."""
    xy = np.zeros((len(speed), 2))
    for k in range(len(speed) - 1):
        xy[k + 1, 0] = xy[k, 0] + DT * speed[k] * math.cos(heading[k])
        xy[k + 1, 1] = xy[k, 1] + DT * speed[k] * math.sin(heading[k])
    return xy


def path_velocity(path: np.ndarray) -> np.ndarray:
    v = np.empty_like(path)
    v[:-1] = (path[1:] - path[:-1]) / DT
    v[-1] = v[-2]
    return v


def straight_road(lanes_left: int, x0: float, x1: float) -> list[np.ndarray]:
    """Boundaries of a road along +x with the ego lane centred on y=0."""
    ys = [-LANE_WIDTH / 2 + LANE_WIDTH * i for i in range(lanes_left + 2)]
    return [np.array([[x0, y], [x1, y]]) for y in ys]


def junction_map(j: float, x_min: float, reach: float) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Four-way junction of two-lane roads occupying x in [j, j+7], y in [-1.75, 5.25]."""
    lo, hi = -LANE_WIDTH / 2, LANE_WIDTH * 1.5
    w = 2 * LANE_WIDTH
    lines = []
    for y in (lo, LANE_WIDTH / 2, hi):
        lines.append(np.array([[x_min, y], [j, y]]))
        lines.append(np.array([[j + w, y], [j + w + reach, y]]))
    for x in (j, j + LANE_WIDTH, j + w):
        lines.append(np.array([[x, hi], [x, hi + reach]]))
        lines.append(np.array([[x, lo - reach], [x, lo]]))
    junction = np.array([[j, lo], [j + w, lo], [j + w, hi], [j, hi]])
    return lines, [junction]


def smooth_speed(rng, p, t, key="ego_speed") -> np.ndarray:
    v0 = rng.uniform(*p[key])
    amp = rng.uniform(*p["speed_amp"])
    period = rng.uniform(*p["period"])
    phase = rng.uniform(0, 2 * math.pi)
    return v0 + amp * np.sin(2 * math.pi * t / period + phase)


# ---------------------------------------------------------------- templates
# Each builder returns (ego speed, ego heading, agent paths {id: (centroids, headings[, visible])},
# boundaries, junctions) in the canonical frame.


def _straight_follow(rng, p, t):
    speed = smooth_speed(rng, p, t)
    heading = np.zeros_like(t)
    ego = integrate_ego(speed, heading)
    g0, gamp = rng.uniform(*p["gap"]), rng.uniform(*p["gap_amp"])
    gperiod, gphase = rng.uniform(*p["period"]), rng.uniform(0, 2 * math.pi)
    gap = g0 + gamp * np.sin(2 * math.pi * t / gperiod + gphase)
    lead = ego + np.stack([gap, np.zeros_like(gap)], axis=1)
    lines = straight_road(1, -100.0, ego[-1, 0] + 150.0)
    return speed, heading, {"lead": (lead, heading)}, lines, []


def _stop_at_junction(rng, p, t):
    v0, ts = rng.uniform(*p["ego_speed"]), rng.uniform(*p["stop_time"])
    speed = np.where(t < ts, 0.5 * v0 * (1 + np.cos(np.pi * np.minimum(t, ts) / ts)), 0.0)
    heading = np.zeros_like(t)
    ego = integrate_ego(speed, heading)
    gap = rng.uniform(*p["gap"])
    lead = ego + np.array([gap, 0.0])
    j = lead[-1, 0] + VEHICLE_LENGTH / 2 + 1.0
    lines, junctions = junction_map(j, -100.0, 150.0)
    agents = {"lead": (lead, heading)}
    # cross traffic keeps the scene moving while the ego waits
    reach = 60.0
    t_spawn, n = -reach / p["cross_speed"][0], 0
    while t_spawn < t[-1]:
        v = rng.uniform(*p["cross_speed"])
        north = bool(rng.integers(2))
        x = j + (1.5 if north else 0.5) * LANE_WIDTH
        sign = 1.0 if north else -1.0
        y = LANE_WIDTH / 2 + sign * (v * (t - t_spawn) - reach)
        path = np.stack([np.full_like(t, x), y], axis=1)
        yaw = np.full_like(t, sign * math.pi / 2)
        visible = np.abs(y - LANE_WIDTH / 2) <= reach
        if visible.any():
            agents[f"cross{n}"] = (path, yaw, visible)
            n += 1
        t_spawn += rng.uniform(*p["headway"])
    return speed, heading, agents, lines, junctions


def _turn(rng, p, t, left: bool):
    speed = smooth_speed(rng, p, t)
    s = np.concatenate([[0.0], np.cumsum(DT * speed[:-1])])
    radius = 7.0 if left else 5.0
    s0 = rng.uniform(*p["turn_start"]) * s[-1]
    sweep = np.clip((s - s0) / radius, 0.0, math.pi / 2)
    heading = sweep if left else -sweep
    ego = integrate_ego(speed, heading)
    # arc start sits 1.75 m (left) / 3.25 m (right) before the junction edge
    x_arc = ego[np.searchsorted(s, s0), 0]
    j = x_arc + (LANE_WIDTH / 2 if left else radius - LANE_WIDTH / 2)
    lines, junctions = junction_map(j, -100.0, 150.0)
    return speed, heading, {}, lines, junctions


def _overtake(rng, p, t):
    speed = smooth_speed(rng, p, t)
    heading = np.zeros_like(t)
    ego = integrate_ego(speed, heading)
    v_agent = float(np.mean(speed)) - rng.uniform(*p["speed_diff"])
    x0 = rng.uniform(*p["gap"])
    other = np.stack([x0 + v_agent * t, np.full_like(t, LANE_WIDTH)], axis=1)
    lines = straight_road(1, -100.0, ego[-1, 0] + 150.0)
    return speed, heading, {"slow": (other, heading)}, lines, []


def _cut_in(rng, p, t):
    v0, dv = rng.uniform(*p["ego_speed"]), rng.uniform(*p["speed_diff"])
    t0, dur = rng.uniform(*p["cut_start"]), rng.uniform(*p["cut_duration"])
    g_cross, brake = rng.uniform(*p["cut_gap"]), rng.uniform(*p["brake"])
    va = v0 - dv
    amp, omega = rng.uniform(*p["lead_speed_amp"]), 2 * math.pi / rng.uniform(*p["period"])
    t_cross = t0 + dur / 2
    t_brake_end = t_cross + dv / brake
    speed = np.where(t < t_cross, v0,
                     np.where(t < t_brake_end, v0 - brake * (t - t_cross), va))
    heading = np.zeros_like(t)
    ego = integrate_ego(speed, heading)
    # lateral offset eases from the left lane to the ego lane
    u = np.clip((t - t0) / dur, 0.0, 1.0)
    lat = LANE_WIDTH * 0.5 * (1 + np.cos(np.pi * u))
    x_start = g_cross + (v0 - va) * t_cross  # ego still at v0 until the crossing
    # once the ego has matched its speed the cutter keeps varying its own
    tau = np.maximum(t - t_brake_end, 0.0)
    lon = x_start + va * t + amp / omega * (1 - np.cos(omega * tau))
    agent = np.stack([lon, lat], axis=1)
    yaw = np.arctan2(np.gradient(lat, DT), np.full_like(lat, va))
    lines = straight_road(1, -100.0, ego[-1, 0] + 150.0)
    return speed, heading, {"cutter": (agent, yaw)}, lines, []


BUILDERS: dict[str, Callable] = {
    "straight_follow": _straight_follow,
    "stop_at_junction": _stop_at_junction,
    "left_turn": lambda rng, p, t: _turn(rng, p, t, left=True),
    "right_turn": lambda rng, p, t: _turn(rng, p, t, left=False),
    "overtake": _overtake,
    "cut_in": _cut_in,
}


def generate_sequence(template: ScenarioTemplate, rng: np.random.Generator,
                      seq_id: str) -> tuple[Sequence, LaneMap]:
    p = template.param_ranges
    lo, hi = p["frames"]
    m = int(rng.integers(int(lo), int(hi) + 1))
    t = np.arange(m) * DT
    speed, heading, agents, lines, junctions = BUILDERS[template.name](rng, p, t)

    # random placement in the world
    theta = rng.uniform(-math.pi, math.pi)
    offset = rng.uniform(-500.0, 500.0, size=2)
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])

    def place(pts):
        return np.asarray(pts) @ rot.T + offset

    ego_xy = place(integrate_ego(speed, heading))
    agent_world = {}
    for aid, (path, yaw, *vis) in agents.items():
        path_w = place(path)
        visible = vis[0] if vis else np.ones(m, dtype=bool)
        agent_world[aid] = (path_w, path_velocity(path_w), np.asarray(yaw) + theta, visible)

    frames = []
    for k in range(m):
        states = []
        for aid, (path_w, vel_w, yaw_w, visible) in agent_world.items():
            if not visible[k]:
                continue
            poly = rectangle(path_w[k, 0], path_w[k, 1], float(yaw_w[k]))
            states.append(AgentState(
                id=aid,
                polygon=tuple((float(x), float(y)) for x, y in poly),
                velocity=(float(vel_w[k, 0]), float(vel_w[k, 1])),
            ))
        frames.append(Frame(
            timestamp=round(k * DT, 10),
            ego=Pose2D(float(ego_xy[k, 0]), float(ego_xy[k, 1]),
                       wrap_angle(float(heading[k]) + theta)),
            speed=float(max(speed[k], 0.0)),
            agents=tuple(states),
        ))
    lane_map = LaneMap(
        boundaries=tuple(tuple((float(x), float(y)) for x, y in place(b)) for b in lines),
        junctions=tuple(tuple((float(x), float(y)) for x, y in place(j)) for j in junctions),
    )
    return Sequence(seq_id, tuple(frames), seq_id), lane_map


def generate_dataset(templates, count_per_template: int, seed: int) -> LabeledDataset:
    """``count_per_template`` scenarios per template, a pure function of the arguments.

    Template ``i`` draws from its own stream seeded by ``(seed, i)``.
    """
    templates = list(templates)
    if not templates:
        raise ConfigError("at least one scenario template is required")
    if count_per_template < 1:
        raise ConfigError("count_per_template must be >= 1")
    seqs, maps, labels = [], {}, {}
    for ti, tpl in enumerate(templates):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed % 2**64, spawn_key=(ti,)))
        for n in range(count_per_template):
            seq_id = f"{tpl.name}_{ti:02d}_{n:04d}"
            seq, lane_map = generate_sequence(tpl, rng, seq_id)
            seqs.append(seq)
            maps[seq.map_ref] = lane_map
            labels[seq_id] = tpl.name
    return LabeledDataset(Dataset(tuple(seqs), maps), labels)


def load_templates(path) -> list[ScenarioTemplate]:
    """Templates file: JSON list of names or of {"name", "param_ranges"} objects."""
    raw = json.loads(Path(path).read_text())
    out = []
    for item in raw:
        if isinstance(item, str):
            out.append(ScenarioTemplate(item))
        else:
            out.append(ScenarioTemplate(item["name"], item.get("param_ranges", {})))
    return out


def write_labeled_dataset(labeled: LabeledDataset, path) -> Path:
    root = write_dataset(labeled.dataset, path)
    (root / "labels.json").write_text(json.dumps(labeled.labels, indent=1, sort_keys=True))
    return root


def read_labels(path) -> dict[str, str] | None:
    f = Path(path) / "labels.json"
    return json.loads(f.read_text()) if f.exists() else None
