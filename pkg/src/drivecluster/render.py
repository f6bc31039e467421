"""Ego-centred 4-layer raster of a driving frame.

Layers: 0 ego speed, 1 agent longitudinal speed, 2 agent lateral speed,
3 lane boundaries. The ego pose is the origin; "ahead" points up (row 0) and
"left" points to column 0. A pixel belongs to a polygon when its centre does.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data_model import Frame, LaneMap, Pose2D, Sequence

N_LAYERS = 4
EGO_LAYER, LON_LAYER, LAT_LAYER, MAP_LAYER = range(N_LAYERS)


@dataclass(frozen=True)
class RasterConfig:
    pixels: int = 129
    extent: float = 100.0
    v_max: float = 20.0
    ego_length: float = 4.8
    ego_width: float = 1.8

    def __post_init__(self):
        if self.pixels <= 0 or self.pixels % 2 == 0:
            raise ValueError(f"pixels must be a positive odd integer, got {self.pixels}")
        if not self.extent > 0:
            raise ValueError("extent must be positive")
        if not self.v_max > 0:
            raise ValueError("v_max must be positive")

    @property
    def resolution(self) -> float:
        return self.extent / self.pixels

    @property
    def shape(self) -> tuple[int, int, int]:
        return (N_LAYERS, self.pixels, self.pixels)

    @property
    def center(self) -> int:
        return (self.pixels - 1) // 2


def to_ego_frame(ego: Pose2D, point) -> np.ndarray:
    """World point(s) -> (longitudinal, lateral) metres relative to ``ego``.

    Accepts a single 2-vector or an (N, 2) array.
    """
    p = np.asarray(point, dtype=np.float64)
    dx = p[..., 0] - ego.x
    dy = p[..., 1] - ego.y
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def decompose_velocity(ego: Pose2D, v) -> tuple[float, float]:
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    vx, vy = float(v[0]), float(v[1])
    return c * vx + s * vy, -s * vx + c * vy


def world_to_pixel(local, cfg: RasterConfig) -> Optional[tuple[int, int]]:
    """Ego-frame metres -> (row, col), or None outside the rendered square."""
    lon, lat = float(local[0]), float(local[1])
    half = cfg.extent / 2
    if abs(lon) > half or abs(lat) > half:
        return None
    row = math.floor((half - lon) / cfg.resolution)
    col = math.floor((half - lat) / cfg.resolution)
    if not (0 <= row < cfg.pixels and 0 <= col < cfg.pixels):
        return None
    return row, col


def pixel_centers(cfg: RasterConfig) -> np.ndarray:
    """Ego-frame coordinate of each row/column centre (same values for both axes)."""
    return cfg.extent / 2 - (np.arange(cfg.pixels) + 0.5) * cfg.resolution


def _points_in_polygon(lon, lat, poly: np.ndarray) -> np.ndarray:
    """Even-odd crossing test; lon/lat broadcast against each other."""
    inside = np.zeros(np.broadcast(lon, lat).shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if y1 == y2:
            continue
        straddle = (y1 > lat) != (y2 > lat)
        x_cross = x1 + (lat - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddle & (lon < x_cross)
    return inside


def polygon_mask(local_poly: np.ndarray, cfg: RasterConfig) -> np.ndarray:
    """Boolean P x P mask of pixels whose centre lies inside ``local_poly``."""
    P = cfg.pixels
    mask = np.zeros((P, P), dtype=bool)
    half, r = cfg.extent / 2, cfg.resolution
    lo_lon, lo_lat = local_poly.min(axis=0)
    hi_lon, hi_lat = local_poly.max(axis=0)
    if lo_lon > half or hi_lon < -half or lo_lat > half or hi_lat < -half:
        return mask
    # row index decreases as lon increases
    r0 = max(0, math.floor((half - hi_lon) / r) - 1)
    r1 = min(P, math.floor((half - lo_lon) / r) + 2)
    c0 = max(0, math.floor((half - hi_lat) / r) - 1)
    c1 = min(P, math.floor((half - lo_lat) / r) + 2)
    if r0 >= r1 or c0 >= c1:
        return mask
    centers = pixel_centers(cfg)
    lon = centers[r0:r1, None]
    lat = centers[None, c0:c1]
    mask[r0:r1, c0:c1] = _points_in_polygon(lon, lat, local_poly)
    return mask


def _clip_segment(p, q, lo, hi):
    """Liang-Barsky clip of segment p->q to the square [lo, hi]^2."""
    t0, t1 = 0.0, 1.0
    d = q - p
    for k in range(2):
        for num, den in ((p[k] - lo, -d[k]), (hi - p[k], d[k])):
            if den == 0:
                if num < 0:
                    return None
                continue
            t = num / den
            if den < 0:
                t0 = max(t0, t)
            else:
                t1 = min(t1, t)
            if t0 > t1:
                return None
    return p + t0 * d, p + t1 * d


def _traverse_cells(a: np.ndarray, b: np.ndarray, P: int):
    """All grid cells crossed by the segment a->b in continuous pixel units.

    Splits the segment at every integer grid-line crossing and takes the cell
    under each piece's midpoint, which is the classic voxel traversal.
    """
    d = b - a
    ts = [0.0, 1.0]
    for k in range(2):
        if d[k] != 0:
            lo, hi = sorted((a[k], b[k]))
            lines = np.arange(math.ceil(lo), math.floor(hi) + 1, dtype=np.float64)
            ts.extend(((lines - a[k]) / d[k]).tolist())
    t = np.unique(np.clip(np.asarray(ts), 0.0, 1.0))
    if len(t) == 1:
        mids = t
    else:
        mids = 0.5 * (t[:-1] + t[1:])
    pts = a[None, :] + mids[:, None] * d[None, :]
    cells = np.floor(pts).astype(np.int64)
    np.clip(cells, 0, P - 1, out=cells)
    return cells[:, 0], cells[:, 1]


def draw_polyline(layer: np.ndarray, local_line: np.ndarray, cfg: RasterConfig) -> None:
    half = cfg.extent / 2
    # continuous pixel coordinates: u along rows, v along columns
    uv = (half - local_line) / cfg.resolution
    for i in range(len(uv) - 1):
        clipped = _clip_segment(uv[i], uv[i + 1], 0.0, float(cfg.pixels))
        if clipped is None:
            continue
        rows, cols = _traverse_cells(clipped[0], clipped[1], cfg.pixels)
        layer[rows, cols] = 1.0


def ego_footprint_mask(cfg: RasterConfig) -> np.ndarray:
    c = pixel_centers(cfg)
    return ((np.abs(c)[:, None] <= cfg.ego_length / 2)
            & (np.abs(c)[None, :] <= cfg.ego_width / 2))


def agent_local_polygon(ego: Pose2D, polygon) -> np.ndarray:
    return to_ego_frame(ego, np.asarray(polygon, dtype=np.float64))


def rasterize_frame(frame: Frame, lane_map: Optional[LaneMap], cfg: RasterConfig) -> np.ndarray:
    """Render one frame into a float32 array of shape (4, P, P)."""
    P = cfg.pixels
    img = np.zeros((N_LAYERS, P, P), dtype=np.float64)
    img[EGO_LAYER][ego_footprint_mask(cfg)] = min(max(frame.speed / cfg.v_max, 0.0), 1.0)

    for agent in frame.agents:
        mask = polygon_mask(agent_local_polygon(frame.ego, agent.polygon), cfg)
        if not mask.any():
            continue
        v_lon, v_lat = decompose_velocity(frame.ego, agent.velocity)
        img[LON_LAYER][mask] = min(max(v_lon / cfg.v_max, -1.0), 1.0)
        img[LAT_LAYER][mask] = min(max(v_lat / cfg.v_max, -1.0), 1.0)

    if lane_map is not None:
        for line in lane_map.boundaries:
            draw_polyline(img[MAP_LAYER], to_ego_frame(frame.ego, line), cfg)
    return img.astype(np.float32)


def render_sequence(seq: Sequence, lane_map: Optional[LaneMap], cfg: RasterConfig) -> list[np.ndarray]:
    return [rasterize_frame(f, lane_map, cfg) for f in seq.frames]


class SparseFrames:
    """Rendered frames of one sequence kept as flat non-zero index/value pairs.

    A dense (4, 129, 129) float32 frame is 266 kB but typically holds a few
    hundred non-zeros, so whole datasets fit in memory this way.
    """

    def __init__(self, shape, indices, values):
        self.shape = tuple(shape)
        self.indices = list(indices)
        self.values = list(values)

    @classmethod
    def from_dense(cls, frames) -> "SparseFrames":
        frames = list(frames)
        shape = frames[0].shape if frames else (N_LAYERS, 1, 1)
        idx, vals = [], []
        for f in frames:
            flat = f.reshape(-1)
            nz = np.flatnonzero(flat).astype(np.int32)
            idx.append(nz)
            vals.append(flat[nz].astype(np.float32))
        return cls(shape, idx, vals)

    def __len__(self) -> int:
        return len(self.indices)

    def dense(self, which=None) -> np.ndarray:
        which = range(len(self)) if which is None else which
        which = list(which)
        size = int(np.prod(self.shape))
        out = np.zeros((len(which), size), dtype=np.float32)
        for row, k in enumerate(which):
            out[row, self.indices[k]] = self.values[k]
        return out.reshape((len(which),) + self.shape)

    def subset(self, which) -> "SparseFrames":
        which = list(which)
        return SparseFrames(self.shape, [self.indices[k] for k in which],
                            [self.values[k] for k in which])


def render_sequence_sparse(seq: Sequence, lane_map: Optional[LaneMap], cfg: RasterConfig) -> SparseFrames:
    return SparseFrames.from_dense(rasterize_frame(f, lane_map, cfg) for f in seq.frames)
