"""Training losses on matched prediction/GT pairs and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .consistency import consistency_loss, pseudo_element
from .decoder import Predictions
from .matching import Assignment, SceneTargets, assign, cost_matrix
from .numerics import Tensor

TERMS = ("cls", "point", "direction", "mask", "consistency")


@dataclass
class LossWeights:
    bev_seg: float = 2.0
    cls: float = 2.0
    point: float = 5.0
    direction: float = 0.005
    mask: float = 2.0
    consistency: float = 2.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")


@dataclass
class LossBreakdown:
    layers: list[dict[str, float]] = field(default_factory=list)
    bev_seg: float = 0.0
    total: float = 0.0

    def to_record(self) -> dict:
        return {"layers": self.layers, "bev_seg": self.bev_seg, "total": self.total}


def _count(weight: np.ndarray) -> float:
    return max(float(weight.sum()), 1.0)


def focal_class_loss(logits: Tensor, target: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss summed over classes, averaged over queries (and leading axes).

    ``target`` is one-hot for matched queries and all-zero for unmatched ones.
    """
    t = np.asarray(target, dtype=logits.data.dtype)
    p = nm.sigmoid(logits)
    ce = nm.softplus(logits) - logits * t
    p_t = p * t + (1.0 - p) * (1.0 - t)
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    loss = ce * (1.0 - p_t) ** gamma * alpha_t
    return nm.reduce_sum(loss) * (1.0 / (np.prod(logits.shape[:-1]) or 1))


def point_loss(pred: Tensor, target: np.ndarray, match: np.ndarray) -> Tensor:
    """Mean over matched pairs of the mean per-point L1 distance. pred (..., E, P, 2), match (..., E)."""
    diff = nm.absolute(pred - np.asarray(target, dtype=pred.data.dtype)).sum(axis=-1).mean(axis=-1)
    return nm.reduce_sum(diff * match.astype(pred.data.dtype)) * (1.0 / _count(match))


def direction_loss(pred: Tensor, target: np.ndarray, match: np.ndarray, eps: float = 1e-8) -> Tensor:
    """Mean over matched pairs of mean (1 - cos) between consecutive edge directions; degenerate edges give 0."""
    dt = pred.data.dtype
    edges = pred[..., 1:, :] - pred[..., :-1, :]
    tgt_edges = np.diff(np.asarray(target, dtype=np.float64), axis=-2)
    tn = np.linalg.norm(tgt_edges, axis=-1, keepdims=True)
    tgt_unit = (tgt_edges / np.maximum(tn, eps)).astype(dt)
    valid = (tn[..., 0] > eps) & (np.linalg.norm(edges.data, axis=-1) > eps)
    cos = (nm.l2_normalize(edges, axis=-1, eps=eps) * tgt_unit).sum(axis=-1)
    per_edge = (1.0 - cos) * valid.astype(dt)
    per_pair = per_edge.mean(axis=-1)
    return nm.reduce_sum(per_pair * match.astype(dt)) * (1.0 / _count(match))


def bce_dice(logits: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """Per-row mean BCE + (1 - dice), reducing the last axis."""
    t = np.asarray(target, dtype=logits.data.dtype)
    bce = (nm.softplus(logits) - logits * t).mean(axis=-1)
    p = nm.sigmoid(logits)
    inter = (p * t).sum(axis=-1)
    dice = (inter * 2.0 + smooth) / (p.sum(axis=-1) + (t.sum(axis=-1) + smooth))
    return bce + (1.0 - dice)


def mask_loss(logits: Tensor, target: np.ndarray, match: np.ndarray) -> Tensor:
    per = bce_dice(logits, target)
    return nm.reduce_sum(per * match.astype(logits.data.dtype)) * (1.0 / _count(match))


def bev_seg_loss(seg_logits: Tensor, union: np.ndarray) -> Tensor:
    """Mean per-cell BCE against the union raster of all GT elements."""
    t = np.asarray(union, dtype=seg_logits.data.dtype)
    return nm.mean(nm.softplus(seg_logits) - seg_logits * t)


def bev_seg_logits(bev: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    h, w, c = bev.shape[-3:]
    return nm.reshape(nm.linear(bev, weight, bias), bev.shape[:-3] + (h * w,))


@dataclass
class DenseTargets:
    cls: np.ndarray  # (B, E, ncls)
    points: np.ndarray  # (B, E, P, 2) in the matched ordering
    masks: np.ndarray  # (B, E, HW)
    match: np.ndarray  # (B, E)


def dense_targets(assignments: list[Assignment], targets: list[SceneTargets], e: int, p: int, hw: int, ncls: int) -> DenseTargets:
    b = len(targets)
    cls = np.zeros((b, e, ncls))
    pts = np.zeros((b, e, p, 2))
    masks = np.zeros((b, e, hw))
    match = np.zeros((b, e))
    for s, (asg, tg) in enumerate(zip(assignments, targets)):
        for (i, j), order in zip(asg.pairs, asg.orderings):
            cls[s, i, tg.classes[j]] = 1.0
            pts[s, i] = tg.points[j][order]
            masks[s, i] = tg.masks[j]
            match[s, i] = 1.0
    return DenseTargets(cls, pts, masks, match)


def match_layer(preds: Predictions, targets: list[SceneTargets], weights: LossWeights) -> list[Assignment]:
    cl, pts, ml = preds.class_logits.data, preds.points.data, preds.mask_logits.data
    cl = cl.reshape((-1,) + cl.shape[-2:])
    pts = pts.reshape((-1,) + pts.shape[-3:])
    ml = ml.reshape((-1,) + ml.shape[-2:])
    return [assign(cost_matrix(cl[s], pts[s], ml[s], tg, weights)) for s, tg in enumerate(targets)]


def _fit(a: np.ndarray, lead: tuple) -> np.ndarray:
    return a.reshape(lead + a.shape[1:])


def layer_losses(preds: Predictions, dense: DenseTargets, w_ps: Tensor) -> dict[str, Tensor]:
    lead = preds.class_logits.shape[:-2]
    match = _fit(dense.match, lead)
    return {
        "cls": focal_class_loss(preds.class_logits, _fit(dense.cls, lead)),
        "point": point_loss(preds.points, _fit(dense.points, lead), match),
        "direction": direction_loss(preds.points, _fit(dense.points, lead), match),
        "mask": mask_loss(preds.mask_logits, _fit(dense.masks, lead), match),
        "consistency": consistency_loss(pseudo_element(preds.point_repr, w_ps), preds.element_repr),
    }


def total_loss(layer_terms: list[dict[str, Tensor]], bev_seg: Tensor | None, weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum over every layer's terms plus the BEV segmentation term once."""
    total = Tensor(0.0)
    bd = LossBreakdown()
    for terms in layer_terms:
        rec = {}
        for name, value in terms.items():
            total = total + value * getattr(weights, name)
            rec[name] = float(value.data)
        bd.layers.append(rec)
    if bev_seg is not None:
        total = total + bev_seg * weights.bev_seg
        bd.bev_seg = float(bev_seg.data)
    bd.total = float(total.data)
    return total, bd
