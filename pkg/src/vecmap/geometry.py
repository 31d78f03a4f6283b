"""Vectorized map elements: coordinates, resampling, rasterization, chamfer distance."""

from __future__ import annotations

import enum
import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


class MapClass(enum.IntEnum):
    PEDESTRIAN_CROSSING = 0
    LANE_DIVIDER = 1
    ROAD_BOUNDARY = 2

    @property
    def short(self) -> str:
        return {0: "ped", 1: "div", 2: "bou"}[int(self)]


NUM_CLASSES = len(MapClass)


@dataclass(frozen=True)
class PerceptionRange:
    x_min: float = -15.0
    x_max: float = 15.0
    y_min: float = -30.0
    y_max: float = 30.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate perception range {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min])

    @property
    def extent(self) -> np.ndarray:
        return np.array([self.width, self.height])

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> bool:
        p = np.asarray(points, dtype=np.float64)
        return bool(
            np.all(p[..., 0] >= self.x_min - tol)
            and np.all(p[..., 0] <= self.x_max + tol)
            and np.all(p[..., 1] >= self.y_min - tol)
            and np.all(p[..., 1] <= self.y_max + tol)
        )

    @classmethod
    def for_grid(cls, h: int, w: int, cell: float) -> "PerceptionRange":
        """Ego-centred range covered by an h x w grid of square cells."""
        return cls(-w * cell / 2, w * cell / 2, -h * cell / 2, h * cell / 2)


@dataclass(frozen=True)
class MapElement:
    cls: MapClass
    points: np.ndarray
    closed: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError(f"a map element needs >= 2 two-dimensional points, got shape {pts.shape}")
        if self.closed and len(pts) > 2 and np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "cls", MapClass(self.cls))

    def __eq__(self, other):
        return (
            isinstance(other, MapElement)
            and self.cls == other.cls
            and self.closed == other.closed
            and np.array_equal(self.points, other.points)
        )

    def to_record(self) -> dict:
        return {"class": int(self.cls), "closed": bool(self.closed), "points": self.points.tolist()}

    @classmethod
    def from_record(cls, rec: dict) -> "MapElement":
        return cls(MapClass(int(rec["class"])), np.asarray(rec["points"], dtype=np.float64), bool(rec["closed"]))


@dataclass
class Scene:
    id: str
    elements: list[MapElement] = field(default_factory=list)

    def to_record(self) -> dict:
        return {"id": self.id, "elements": [e.to_record() for e in self.elements]}

    @classmethod
    def from_record(cls, rec: dict) -> "Scene":
        return cls(str(rec["id"]), [MapElement.from_record(e) for e in rec["elements"]])


def write_scenes(path: str | Path, scenes: Iterable[Scene]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene.to_record()) + "\n")


def read_scenes(path: str | Path) -> list[Scene]:
    with open(path, encoding="utf-8") as fh:
        return [Scene.from_record(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------- coordinates


def normalize(points, rng: PerceptionRange) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - rng.lower) / rng.extent


def denormalize(points, rng: PerceptionRange) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) * rng.extent + rng.lower


# ---------------------------------------------------------------- resampling


def _path(points: np.ndarray, closed: bool) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if closed:
        pts = np.vstack([pts, pts[:1]])
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(np.diff(pts, axis=0) != 0, axis=1)
    return pts[keep]


def polyline_length(points, closed: bool = False) -> float:
    pts = _path(points, closed)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def resample_points(points, n: int, closed: bool = False) -> np.ndarray:
    """n points equally spaced by arc length.

    Open curves keep both endpoints; closed loops start at the first vertex
    and do not repeat it.
    """
    if n < 2:
        raise ValueError("resampling needs n >= 2")
    pts = _path(points, closed)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = seg.sum()
    if len(pts) < 2 or total <= 0:
        raise ValueError("cannot resample a zero-length element")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.arange(n) * (total / n) if closed else np.linspace(0.0, total, n)
    return np.stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])], axis=1)


def resample(element: MapElement, n: int) -> np.ndarray:
    return resample_points(element.points, n, element.closed)


# ---------------------------------------------------------------- chamfer distance


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def chamfer_distance(a: MapElement, b: MapElement, n: int = 100) -> float:
    """Symmetric chamfer distance between two elements, both resampled to n points."""
    return chamfer_points(resample(a, n), resample(b, n))


def chamfer_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise chamfer distances between resampled curve sets a (m, n, 2) and b (k, n, 2)."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    d = np.sqrt(((a[:, None, :, None, :] - b[None, :, None, :, :]) ** 2).sum(-1))
    return 0.5 * (d.min(axis=3).mean(axis=2) + d.min(axis=2).mean(axis=2))


# ---------------------------------------------------------------- rasterization


def _segment_distance(cells: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(cells - a, axis=-1)
    t = np.clip(((cells - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(cells - (a + t[..., None] * ab), axis=-1)


def to_grid_coords(points, h: int, w: int, rng: PerceptionRange) -> np.ndarray:
    """Meters -> continuous (col, row) coordinates where integers are cell centres."""
    u = normalize(points, rng)
    return np.stack([u[..., 0] * w - 0.5, u[..., 1] * h - 0.5], axis=-1)


def rasterize_points(points, closed: bool, h: int, w: int, rng: PerceptionRange, thickness: float = 1.0) -> np.ndarray:
    if h <= 0 or w <= 0:
        raise ValueError(f"raster size must be positive, got {h}x{w}")
    if thickness < 1:
        raise ValueError("thickness must be >= 1 cell")
    g = to_grid_coords(points, h, w, rng)
    if closed:
        g = np.vstack([g, g[:1]])
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    cells = np.stack([cols, rows], axis=-1)
    dist = np.full((h, w), np.inf)
    for a, b in zip(g[:-1], g[1:]):
        dist = np.minimum(dist, _segment_distance(cells, a, b))
    return (dist <= thickness / 2).astype(np.uint8)


def rasterize(element: MapElement, h: int, w: int, rng: PerceptionRange, thickness: float = 1.0) -> np.ndarray:
    """Binary h x w mask of cells within thickness/2 (cell units) of the element outline.

    Row i covers y from y_min upward, column j covers x from x_min rightward.
    """
    return rasterize_points(element.points, element.closed, h, w, rng, thickness)


def rasterize_scene(scene: Scene, h: int, w: int, rng: PerceptionRange, thickness: float = 1.0) -> np.ndarray:
    """Per-class occupancy, shape (NUM_CLASSES, h, w)."""
    occ = np.zeros((NUM_CLASSES, h, w), dtype=np.uint8)
    for e in scene.elements:
        occ[int(e.cls)] |= rasterize(e, h, w, rng, thickness)
    return occ


# ---------------------------------------------------------------- orderings


@functools.lru_cache(maxsize=None)
def _ordering_table(p: int, closed: bool) -> np.ndarray:
    fwd = np.arange(p)
    if not closed:
        table = np.stack([fwd, fwd[::-1]])
    else:
        rev = fwd[::-1]
        table = np.stack([np.roll(fwd, -s) for s in range(p)] + [np.roll(rev, -s) for s in range(p)])
    table.flags.writeable = False
    return table


def ordering_indices(p: int, closed: bool) -> np.ndarray:
    """Index permutations of a P-point element treated as the same shape.

    Open polylines: forward and reversed. Closed loops: every cyclic shift in
    both directions (2P rows).
    """
    return _ordering_table(int(p), bool(closed))


def equivalent_orderings(points: np.ndarray, closed: bool) -> list[np.ndarray]:
    pts = np.asarray(points)
    return [pts[idx] for idx in ordering_indices(len(pts), closed)]
