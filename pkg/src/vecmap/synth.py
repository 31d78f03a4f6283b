"""Synthetic scenes and a stand-in BEV encoder.

The encoder rasterizes ground truth into per-class occupancy, projects it to
C channels with a trainable per-cell linear map, adds the fixed sine
embedding and Gaussian noise. It replaces the camera/LiDAR feature extractor
so the decoder can be trained on a desk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .decoder import sine_position_embedding
from .geometry import NUM_CLASSES, MapClass, MapElement, PerceptionRange, Scene, rasterize_scene
from .numerics import ParamStore, Tensor


@dataclass
class SynthConfig:
    seed: int = 0
    # (min, max) elements per class, indexed by MapClass code
    counts: list[list[int]] = field(default_factory=lambda: [[1, 2], [1, 2], [1, 2]])
    grid_h: int = 40
    grid_w: int = 20
    cell_size: float = 0.3
    noise_sigma: float = 0.1
    raster_thickness: float = 1.0

    def __post_init__(self):
        if len(self.counts) != NUM_CLASSES or any(lo < 0 or hi < lo for lo, hi in self.counts):
            raise ValueError(f"counts must be {NUM_CLASSES} (min, max) pairs with 0 <= min <= max")
        if self.grid_h <= 0 or self.grid_w <= 0 or self.cell_size <= 0:
            raise ValueError("grid size and cell size must be positive")

    @property
    def perception_range(self) -> PerceptionRange:
        return PerceptionRange.for_grid(self.grid_h, self.grid_w, self.cell_size)

    @property
    def max_elements(self) -> int:
        return sum(hi for _, hi in self.counts)


def _polyline(rng: np.random.Generator, pr: PerceptionRange, x_band: tuple[float, float]) -> np.ndarray:
    n_ctrl = int(rng.integers(2, 6))
    span = rng.uniform(0.6, 1.0) * pr.height
    y0 = rng.uniform(pr.y_min, pr.y_max - span)
    ys = np.sort(rng.uniform(y0, y0 + span, size=n_ctrl))
    ys[0], ys[-1] = y0, y0 + span
    lo, hi = x_band
    x = rng.uniform(lo, hi)
    xs = [x]
    for _ in range(n_ctrl - 1):
        x = float(np.clip(x + rng.normal(0.0, 0.08 * pr.width), lo, hi))
        xs.append(x)
    return np.stack([np.asarray(xs), ys], axis=1)


def _crossing(rng: np.random.Generator, pr: PerceptionRange) -> np.ndarray:
    w = rng.uniform(0.35, 0.7) * pr.width
    d = rng.uniform(0.08, 0.15) * pr.height
    cx = rng.uniform(pr.x_min + w / 2, pr.x_max - w / 2)
    cy = rng.uniform(pr.y_min + d / 2, pr.y_max - d / 2)
    return np.array([[cx - w / 2, cy - d / 2], [cx + w / 2, cy - d / 2], [cx + w / 2, cy + d / 2], [cx - w / 2, cy + d / 2]])


def generate_scene(seed: int, cfg: SynthConfig, scene_id: str | None = None) -> Scene:
    """Deterministic random scene: straight-ish dividers/boundaries running along Y, rectangular crossings."""
    rng = nm.make_rng(seed, 7)
    pr = cfg.perception_range
    margin = 0.05 * pr.width
    elements = []
    for cls in MapClass:
        lo, hi = cfg.counts[int(cls)]
        for _ in range(int(rng.integers(lo, hi + 1))):
            if cls == MapClass.PEDESTRIAN_CROSSING:
                pts = _crossing(rng, pr)
                closed = True
            else:
                if cls == MapClass.ROAD_BOUNDARY:
                    side = 1 if rng.uniform() < 0.5 else -1
                    band = sorted((side * 0.3 * pr.width, side * (0.5 * pr.width - margin)))
                else:
                    band = (-0.3 * pr.width, 0.3 * pr.width)
                pts = _polyline(rng, pr, (band[0], band[1]))
                closed = False
            pts[:, 0] = np.clip(pts[:, 0], pr.x_min, pr.x_max)
            pts[:, 1] = np.clip(pts[:, 1], pr.y_min, pr.y_max)
            elements.append(MapElement(cls, pts, closed))
    return Scene(scene_id if scene_id is not None else f"scene-{seed}", elements)


def scene_seed(run_seed: int, index: int) -> int:
    return int(nm.make_rng(run_seed, 11, index).integers(0, 2**31 - 1))


def generate_scenes(cfg: SynthConfig, n: int) -> list[Scene]:
    return [generate_scene(scene_seed(cfg.seed, i), cfg, f"scene-{i:04d}") for i in range(n)]


# ---------------------------------------------------------------- BEV encoder


def init_encoder(store: ParamStore, channels: int, seed: int) -> None:
    rng = nm.make_rng(seed, 3)
    store.add("encoder.weight", rng.normal(0.0, 1.0, size=(NUM_CLASSES, channels)))
    store.add("encoder.bias", np.zeros(channels))


def occupancy(scene: Scene, cfg: SynthConfig) -> np.ndarray:
    """(H, W, 3) class occupancy grid."""
    occ = rasterize_scene(scene, cfg.grid_h, cfg.grid_w, cfg.perception_range, cfg.raster_thickness)
    return np.moveaxis(occ, 0, -1).astype(np.float64)


def encode_occupancy(occ: np.ndarray, weight: Tensor, bias: Tensor, noise_sigma: float = 0.0,
                     noise_seed: int | None = None) -> Tensor:
    """Occupancy (..., H, W, 3) -> BEV features (..., H, W, C)."""
    h, w = occ.shape[-3:-1]
    c = weight.shape[-1]
    feats = nm.linear(Tensor(occ, dtype=weight.data.dtype), weight, bias)
    feats = feats + sine_position_embedding(h, w, c).astype(weight.data.dtype)
    if noise_sigma > 0:
        noise = nm.make_rng(0 if noise_seed is None else noise_seed, 5).normal(0.0, noise_sigma, size=feats.shape)
        feats = feats + noise.astype(weight.data.dtype)
    return feats


def encode_bev(scene: Scene, store: ParamStore, cfg: SynthConfig, noise_seed: int | None = None,
               noise_sigma: float | None = None) -> Tensor:
    sigma = cfg.noise_sigma if noise_sigma is None else noise_sigma
    return encode_occupancy(occupancy(scene, cfg), store["encoder.weight"], store["encoder.bias"], sigma, noise_seed)
