"""Driving sequences, lane maps and the on-disk ingestion format.

A dataset directory holds a ``manifest.json`` plus one line-delimited JSON
file per sequence and one JSON file per map::

    manifest.json   {"sequences": [{"id", "file", "map_ref"}], "maps": {ref: file}}
    <seq>.jsonl     one frame per line:
                    {"t", "ego": {"x","y","heading","speed"},
                     "agents": [{"id","polygon":[[x,y],...],"vx","vy"}], "light"?}
    <map>.json      {"boundaries": [[[x,y],...],...], "junctions"?: [[[x,y],...],...]}

World coordinates are metric (east-x, north-y); angles in radians, speeds in m/s.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence as Seq

MANIFEST_NAME = "manifest.json"
TRAFFIC_LIGHTS = ("red", "yellow", "green", "none")

Point = tuple[float, float]


class DataError(Exception):
    """Base class for ingestion failures."""


class ParseError(DataError):
    def __init__(self, path, line: Optional[int], msg: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {msg}")
        self.path = Path(path)
        self.line = line


class MapReferenceError(DataError):
    pass


class ValidationError(DataError):
    def __init__(self, sequence_id: str, violations: list[str]):
        super().__init__(f"sequence {sequence_id!r}: " + "; ".join(violations))
        self.sequence_id = sequence_id
        self.violations = violations


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    heading: float


@dataclass(frozen=True)
class AgentState:
    id: str
    polygon: tuple[Point, ...]
    velocity: Point


@dataclass(frozen=True)
class Frame:
    timestamp: float
    ego: Pose2D
    speed: float
    agents: tuple[AgentState, ...] = ()
    traffic_light: Optional[str] = None


@dataclass(frozen=True)
class LaneMap:
    boundaries: tuple[tuple[Point, ...], ...]
    junctions: tuple[tuple[Point, ...], ...] = ()


@dataclass(frozen=True)
class Sequence:
    id: str
    frames: tuple[Frame, ...]
    map_ref: str

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class Dataset:
    sequences: tuple[Sequence, ...] = ()
    maps: Mapping[str, LaneMap] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sequences)

    def map_for(self, seq: Sequence) -> LaneMap:
        try:
            return self.maps[seq.map_ref]
        except KeyError:
            raise MapReferenceError(
                f"sequence {seq.id!r} references unknown map {seq.map_ref!r}"
            ) from None

    def by_id(self) -> dict[str, Sequence]:
        return {s.id: s for s in self.sequences}

    def subset(self, ids: Iterable[str]) -> "Dataset":
        lookup = self.by_id()
        seqs = tuple(lookup[i] for i in ids)
        refs = {s.map_ref for s in seqs}
        return Dataset(seqs, {k: v for k, v in self.maps.items() if k in refs})


# ---------------------------------------------------------------- validation


def _finite(*vals: float) -> bool:
    return all(math.isfinite(v) for v in vals)


def _segments_cross(p1: Point, p2: Point, q1: Point, q2: Point) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
                and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12)

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return ((o1 == 0 and on_seg(p1, p2, q1)) or (o2 == 0 and on_seg(p1, p2, q2))
            or (o3 == 0 and on_seg(q1, q2, p1)) or (o4 == 0 and on_seg(q1, q2, p2)))


def polygon_is_simple(poly: Seq[Point]) -> bool:
    n = len(poly)
    edges = [(poly[i], poly[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            # adjacent edges share a vertex by construction
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(*edges[i], *edges[j]):
                return False
    return True


def validate_frame(frame: Frame, index: int) -> list[str]:
    out = []
    pre = f"frame {index}"
    e = frame.ego
    if not _finite(e.x, e.y):
        out.append(f"{pre}: non-finite ego position")
    if not _finite(e.heading) or not (-math.pi < e.heading <= math.pi):
        out.append(f"{pre}: ego heading outside (-pi, pi]")
    if not _finite(frame.speed):
        out.append(f"{pre}: non-finite ego speed")
    elif frame.speed < 0:
        out.append(f"{pre}: negative ego speed")
    if frame.traffic_light is not None and frame.traffic_light not in TRAFFIC_LIGHTS:
        out.append(f"{pre}: unknown traffic light {frame.traffic_light!r}")
    seen = set()
    for a in frame.agents:
        if a.id in seen:
            out.append(f"{pre}: duplicate agent id {a.id}")
        seen.add(a.id)
        if len(a.polygon) < 3:
            out.append(f"{pre}: agent {a.id} polygon has <3 vertices")
        elif not all(_finite(*p) for p in a.polygon):
            out.append(f"{pre}: agent {a.id} polygon has non-finite vertex")
        elif not polygon_is_simple(a.polygon):
            out.append(f"{pre}: agent {a.id} polygon self-intersects")
        if not _finite(*a.velocity):
            out.append(f"{pre}: agent {a.id} non-finite velocity")
    return out


def validate_sequence(seq: Sequence) -> list[str]:
    """Return every invariant violation in ``seq``; empty means valid."""
    out = []
    if len(seq.frames) < 2:
        out.append(f"sequence has {len(seq.frames)} frames, need at least 2")
    for k, frame in enumerate(seq.frames):
        if not _finite(frame.timestamp):
            out.append(f"frame {k}: non-finite timestamp")
        elif k > 0 and not frame.timestamp > seq.frames[k - 1].timestamp:
            out.append(f"frame {k}: non-monotone timestamps")
        out.extend(validate_frame(frame, k))
    return out


def validate_map(lane_map: LaneMap) -> list[str]:
    out = []
    for i, line in enumerate(lane_map.boundaries):
        if len(line) < 2:
            out.append(f"boundary {i} has <2 points")
        if not all(_finite(*p) for p in line):
            out.append(f"boundary {i} has non-finite point")
    for i, poly in enumerate(lane_map.junctions):
        if len(poly) < 3 or not all(_finite(*p) for p in poly):
            out.append(f"junction {i} is not a finite polygon")
    return out


# ---------------------------------------------------------------- json codec


def _points(raw, where) -> tuple[Point, ...]:
    try:
        return tuple((float(p[0]), float(p[1])) for p in raw)
    except (TypeError, ValueError, IndexError) as exc:
        raise ValueError(f"bad point list in {where}: {exc}") from None


def frame_from_json(obj: dict) -> Frame:
    ego = obj["ego"]
    agents = tuple(
        AgentState(
            id=str(a["id"]),
            polygon=_points(a["polygon"], f"agent {a['id']}"),
            velocity=(float(a["vx"]), float(a["vy"])),
        )
        for a in obj.get("agents", [])
    )
    return Frame(
        timestamp=float(obj["t"]),
        ego=Pose2D(float(ego["x"]), float(ego["y"]), float(ego["heading"])),
        speed=float(ego["speed"]),
        agents=agents,
        traffic_light=obj.get("light"),
    )


def frame_to_json(frame: Frame) -> dict:
    out = {
        "t": frame.timestamp,
        "ego": {"x": frame.ego.x, "y": frame.ego.y,
                "heading": frame.ego.heading, "speed": frame.speed},
        "agents": [
            {"id": a.id, "polygon": [list(p) for p in a.polygon],
             "vx": a.velocity[0], "vy": a.velocity[1]}
            for a in frame.agents
        ],
    }
    if frame.traffic_light is not None:
        out["light"] = frame.traffic_light
    return out


def map_from_json(obj: dict) -> LaneMap:
    return LaneMap(
        boundaries=tuple(_points(b, "boundary") for b in obj["boundaries"]),
        junctions=tuple(_points(j, "junction") for j in obj.get("junctions", [])),
    )


def map_to_json(lane_map: LaneMap) -> dict:
    return {
        "boundaries": [[list(p) for p in b] for b in lane_map.boundaries],
        "junctions": [[list(p) for p in j] for j in lane_map.junctions],
    }


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None
    except OSError as exc:
        raise ParseError(path, None, str(exc)) from None


def read_sequence(path: Path, seq_id: str, map_ref: str) -> Sequence:
    frames = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ParseError(path, None, str(exc)) from None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            frames.append(frame_from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, lineno, f"malformed frame record ({exc!r})") from None
    return Sequence(seq_id, tuple(frames), map_ref)


def parse_dataset(path) -> Dataset:
    """Load and validate a dataset directory.

    An empty directory yields an empty dataset. Raises ``ParseError`` on
    malformed records, ``MapReferenceError`` on dangling map references and
    ``ValidationError`` on invariant violations.
    """
    root = Path(path)
    if not root.is_dir():
        raise ParseError(root, None, "dataset directory does not exist")
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        if any(root.iterdir()):
            raise ParseError(manifest_path, None, "missing dataset manifest")
        return Dataset()
    manifest = _read_json(manifest_path)
    if not isinstance(manifest, dict):
        raise ParseError(manifest_path, None, "manifest must be a JSON object")

    maps = {}
    for ref, fname in manifest.get("maps", {}).items():
        mpath = root / fname
        try:
            lane_map = map_from_json(_read_json(mpath))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(mpath, None, f"malformed map ({exc!r})") from None
        problems = validate_map(lane_map)
        if problems:
            raise ParseError(mpath, None, "; ".join(problems))
        maps[str(ref)] = lane_map

    seqs = []
    seen = set()
    for entry in manifest.get("sequences", []):
        try:
            seq_id, fname, ref = str(entry["id"]), entry["file"], str(entry["map_ref"])
        except (KeyError, TypeError):
            raise ParseError(manifest_path, None, f"bad sequence entry {entry!r}") from None
        if seq_id in seen:
            raise ValidationError(seq_id, ["duplicate sequence id"])
        seen.add(seq_id)
        if ref not in maps:
            raise MapReferenceError(f"sequence {seq_id!r} references unknown map {ref!r}")
        seq = read_sequence(root / fname, seq_id, ref)
        problems = validate_sequence(seq)
        if problems:
            raise ValidationError(seq_id, problems)
        seqs.append(seq)
    return Dataset(tuple(seqs), maps)


def _safe_name(s: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in s)


def write_dataset(dataset: Dataset, path) -> Path:
    """Serialize ``dataset`` in the ingestion format; returns the directory."""
    root = Path(path)
    (root / "sequences").mkdir(parents=True, exist_ok=True)
    (root / "maps").mkdir(parents=True, exist_ok=True)
    manifest = {"sequences": [], "maps": {}}
    for ref in sorted(dataset.maps):
        fname = f"maps/{_safe_name(ref)}.json"
        (root / fname).write_text(json.dumps(map_to_json(dataset.maps[ref])))
        manifest["maps"][ref] = fname
    for seq in dataset.sequences:
        fname = f"sequences/{_safe_name(seq.id)}.jsonl"
        with open(root / fname, "w") as fh:
            for frame in seq.frames:
                fh.write(json.dumps(frame_to_json(frame)) + "\n")
        manifest["sequences"].append({"id": seq.id, "file": fname, "map_ref": seq.map_ref})
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    return root
