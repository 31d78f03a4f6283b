"""Encoder + decoder + BEV segmentation head wired together, with the training loss."""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .decoder import DecoderConfig, Predictions, decoder_forward, init_params
from .geometry import MapClass, MapElement, PerceptionRange, denormalize
from .losses import (LossBreakdown, LossWeights, bev_seg_logits, bev_seg_loss, dense_targets, layer_losses,
                     match_layer, total_loss)
from .matching import Assignment, SceneTargets
from .metrics import DetectionRecord
from .numerics import ParamStore, Tensor
from .synth import encode_occupancy, init_encoder


def build_params(dcfg: DecoderConfig, seed: int) -> ParamStore:
    store = init_params(dcfg, seed)
    init_encoder(store, dcfg.channels, seed)
    rng = nm.make_rng(seed, 4)
    store.add("bev_seg.weight", rng.normal(0.0, 1.0 / np.sqrt(dcfg.channels), size=(dcfg.channels, 1)))
    store.add("bev_seg.bias", np.zeros(1))
    return store


def forward(store: ParamStore, dcfg: DecoderConfig, occ: np.ndarray, noise_sigma: float = 0.0,
            noise_seed: int | None = None, detach_anchors: bool = True) -> tuple[Tensor, list[Predictions]]:
    """occ (..., H, W, 3) -> (BEV features, per-layer predictions)."""
    bev = encode_occupancy(occ, store["encoder.weight"], store["encoder.bias"], noise_sigma, noise_seed)
    return bev, decoder_forward(store, dcfg, bev, detach_anchors=detach_anchors)


def compute_loss(store: ParamStore, dcfg: DecoderConfig, weights: LossWeights, occ: np.ndarray,
                 targets: list[SceneTargets], noise_sigma: float = 0.0, noise_seed: int | None = None,
                 assignments: list[list[Assignment]] | None = None, detach_anchors: bool = True,
                 ) -> tuple[Tensor, LossBreakdown, list[Predictions], list[list[Assignment]]]:
    """Total training loss for a batch occ (B, H, W, 3).

    Every layer is matched on its own predictions unless ``assignments``
    (per layer, per scene) is supplied.
    """
    bev, preds = forward(store, dcfg, occ, noise_sigma, noise_seed, detach_anchors)
    e, p = dcfg.num_elements, dcfg.num_points
    hw = dcfg.grid_h * dcfg.grid_w
    terms = []
    used = []
    for layer, pr in enumerate(preds):
        asg = assignments[layer] if assignments is not None else match_layer(pr, targets, weights)
        used.append(asg)
        dense = dense_targets(asg, targets, e, p, hw, dcfg.num_classes)
        terms.append(layer_losses(pr, dense, store[f"layers.{layer}.w_ps"]))
    seg = bev_seg_loss(bev_seg_logits(bev, store["bev_seg.weight"], store["bev_seg.bias"]),
                       np.stack([t.union for t in targets]).reshape(bev.shape[:-3] + (hw,)))
    loss, bd = total_loss(terms, seg, weights)
    return loss, bd, preds, used


def to_detections(preds: Predictions, scene_ids: list[str], rng: PerceptionRange) -> list[DetectionRecord]:
    """One detection per query: its best class, that class's probability, denormalized points."""
    logits = preds.class_logits.data.reshape((len(scene_ids),) + preds.class_logits.shape[-2:]).astype(np.float64)
    pts = preds.points.data.reshape((len(scene_ids),) + preds.points.shape[-3:]).astype(np.float64)
    probs = 1.0 / (1.0 + np.exp(-logits))
    out = []
    for s, sid in enumerate(scene_ids):
        for i in range(probs.shape[1]):
            c = int(np.argmax(probs[s, i]))
            cls = MapClass(c)
            el = MapElement(cls, denormalize(pts[s, i], rng), closed=cls == MapClass.PEDESTRIAN_CROSSING)
            out.append(DetectionRecord(sid, cls, float(probs[s, i, c]), el))
    return out
