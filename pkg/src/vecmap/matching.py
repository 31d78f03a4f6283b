"""Set matching between predicted element slots and ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .geometry import PerceptionRange, Scene, normalize, ordering_indices, rasterize, resample

if TYPE_CHECKING:
    from .losses import LossWeights


@dataclass
class SceneTargets:
    """Ground truth of one scene in decoder units: normalized points and flattened masks."""

    classes: np.ndarray  # (G,)
    points: np.ndarray  # (G, P, 2)
    closed: np.ndarray  # (G,)
    masks: np.ndarray  # (G, H*W)
    union: np.ndarray  # (H*W,)

    @property
    def num_gt(self) -> int:
        return len(self.classes)


def build_targets(scene: Scene, num_points: int, h: int, w: int, rng: PerceptionRange, thickness: float = 1.0) -> SceneTargets:
    g = len(scene.elements)
    pts = np.zeros((g, num_points, 2))
    masks = np.zeros((g, h * w))
    for i, e in enumerate(scene.elements):
        pts[i] = normalize(resample(e, num_points), rng)
        masks[i] = rasterize(e, h, w, rng, thickness).reshape(-1)
    union = (masks.sum(0) > 0).astype(np.float64) if g else np.zeros(h * w)
    return SceneTargets(
        np.array([int(e.cls) for e in scene.elements], dtype=np.int64),
        pts,
        np.array([e.closed for e in scene.elements], dtype=bool),
        masks,
        union,
    )


@dataclass
class CostMatrix:
    total: np.ndarray  # (E, G)
    cls: np.ndarray
    point: np.ndarray
    direction: np.ndarray
    mask: np.ndarray
    ordering: np.ndarray  # (E, G, P) index permutation of the GT points minimizing the point cost

    @property
    def shape(self) -> tuple[int, int]:
        return self.total.shape


@dataclass
class Assignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched: list[int] = field(default_factory=list)
    orderings: list[np.ndarray] = field(default_factory=list)

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _unit(v, eps=1e-8):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, eps), n[..., 0] > eps


def direction_dissimilarity(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Mean (1 - cos) over consecutive edges; degenerate edges contribute 0. Broadcasts over leading axes."""
    up, okp = _unit(np.diff(pred, axis=-2))
    ug, okg = _unit(np.diff(gt, axis=-2))
    return ((1.0 - (up * ug).sum(-1)) * (okp & okg)).mean(-1)


def cost_matrix(class_logits: np.ndarray, points: np.ndarray, mask_logits: np.ndarray, targets: SceneTargets,
                weights: LossWeights, alpha: float = 0.25, gamma: float = 2.0) -> CostMatrix:
    """Matching cost of every (prediction, GT) pair.

    class: alpha (1-p)^gamma (-log p) for the GT class probability p;
    point: min over equivalent GT orderings of the mean per-point L1 distance;
    direction: edge cosine dissimilarity under that same ordering;
    mask: mean BCE + (1 - dice) against the GT raster.
    """
    cl = np.asarray(class_logits, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    ml = np.asarray(mask_logits, dtype=np.float64).reshape(len(cl), -1)
    e, p = pts.shape[:2]
    g = targets.num_gt
    if g and targets.points.shape[1] != p:
        raise ValueError(f"prediction has {p} points, ground truth has {targets.points.shape[1]}")

    logp = -_softplus(-cl[:, targets.classes])
    prob = np.exp(logp)
    c_cls = alpha * (1.0 - prob) ** gamma * (-logp)

    c_pt = np.zeros((e, g))
    c_dir = np.zeros((e, g))
    order = np.zeros((e, g, p), dtype=np.int64)
    for j in range(g):
        idx = ordering_indices(p, bool(targets.closed[j]))
        cand = targets.points[j][idx]  # (O, P, 2)
        l1 = np.abs(pts[:, None] - cand[None]).sum(-1).mean(-1)  # (E, O)
        # L1 ties are common for symmetric shapes; break them by the direction term
        # so the cost does not depend on how the GT points happen to be listed
        dirs = direction_dissimilarity(pts[:, None], cand[None])  # (E, O)
        tied = l1 <= l1.min(axis=1, keepdims=True) + 1e-12
        best = np.where(tied, dirs, np.inf).argmin(axis=1)
        c_pt[:, j] = l1[np.arange(e), best]
        order[:, j] = idx[best]
        c_dir[:, j] = dirs[np.arange(e), best]

    hw = ml.shape[1]
    t = targets.masks
    bce = _softplus(ml).mean(1)[:, None] - ml @ t.T / hw
    sig = _sigmoid(ml)
    dice = 1.0 - (2.0 * sig @ t.T + 1.0) / (sig.sum(1)[:, None] + t.sum(1)[None, :] + 1.0)
    c_mask = bce + dice

    total = weights.cls * c_cls + weights.point * c_pt + weights.direction * c_dir + weights.mask * c_mask
    return CostMatrix(total, c_cls, c_pt, c_dir, c_mask, order)


def matching_cost(class_logits, points, mask_logits, targets: SceneTargets, gt_index: int,
                  weights: LossWeights) -> tuple[float, dict, np.ndarray]:
    """Cost of one prediction row against one GT element: (total, breakdown, best ordering)."""
    sub = SceneTargets(targets.classes[gt_index:gt_index + 1], targets.points[gt_index:gt_index + 1],
                       targets.closed[gt_index:gt_index + 1], targets.masks[gt_index:gt_index + 1], targets.union)
    cm = cost_matrix(np.asarray(class_logits)[None], np.asarray(points)[None], np.asarray(mask_logits).reshape(1, -1), sub, weights)
    breakdown = {"cls": float(cm.cls[0, 0]), "point": float(cm.point[0, 0]),
                 "direction": float(cm.direction[0, 0]), "mask": float(cm.mask[0, 0])}
    return float(cm.total[0, 0]), breakdown, cm.ordering[0, 0]


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost injective assignment, O(n^3) shortest augmenting paths with potentials.

    Rectangular inputs are padded to square with a constant larger than every
    entry; pairs touching padding are dropped. Returns (row, col) sorted by row.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.size == 0:
        return []
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = c.shape
    n = max(rows, cols)
    pad = float(np.abs(c).max()) + 1.0
    a = np.full((n, n), pad)
    a[:rows, :cols] = c

    # 1-based potentials/matching: col_match[j] is the row matched to column j.
    # Plain lists: at n ~ 50 per-element Python beats numpy call overhead.
    a = a.tolist()
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    col_match = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        col_match[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = col_match[j0]
            row = a[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[col_match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if col_match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_match[j0] = col_match[j1]
            j0 = j1
    pairs = [(int(col_match[j]) - 1, j - 1) for j in range(1, n + 1)]
    return sorted((r, q) for r, q in pairs if r < rows and q < cols)


def assign(cm: CostMatrix) -> Assignment:
    e = cm.shape[0]
    pairs = hungarian(cm.total)
    matched = {r for r, _ in pairs}
    return Assignment(pairs, [i for i in range(e) if i not in matched], [cm.ordering[r, q] for r, q in pairs])
