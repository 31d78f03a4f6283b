"""Hybrid point/element query decoder.

Each layer takes the hybrid query (E x (P+1) x C: P point queries and one
element query per slot), anchor points (E x P x 2 in [0, 1]) and binary
anchor masks (E x H*W), and runs

    point feature extractor    deformable sampling around the anchors
    element feature extractor  masked attention over the BEV grid
    hybrider                   per-level refinement, then cross-level update
    self-attention + FFN       over all E*(P+1) tokens
    heads                      class logits, sigmoid points, mask logits

Next-layer anchors are the point outputs; next-layer masks are the mask
outputs thresholded at 0.5. All ops accept arbitrary leading batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import ParamStore, Tensor


@dataclass
class DecoderConfig:
    num_elements: int = 50
    num_points: int = 20
    channels: int = 256
    num_layers: int = 6
    num_samples: int = 4
    grid_h: int = 200
    grid_w: int = 100
    num_classes: int = 3
    self_attn_heads: int = 4
    ffn_dim: int = 512
    scale_mask_logits: bool = False
    cross_level_update: bool = True
    mask_threshold: float = 0.5

    def __post_init__(self):
        for name in ("num_elements", "num_points", "channels", "num_layers", "num_samples",
                     "grid_h", "grid_w", "num_classes", "self_attn_heads", "ffn_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"DecoderConfig.{name} must be positive")
        if self.channels % self.self_attn_heads:
            raise ValueError("channels must be divisible by self_attn_heads")
        if self.channels % 4:
            raise ValueError("channels must be divisible by 4 for the 2D sine embedding")


class HiQuery:
    """Hybrid query tensor, E x (P+1) x C; the last row of each slot is the element query."""

    def __init__(self, tensor: Tensor):
        self.tensor = tensor

    @property
    def num_points(self) -> int:
        return self.tensor.shape[-2] - 1

    def decompose(self) -> tuple[Tensor, Tensor]:
        p = self.num_points
        return self.tensor[..., :p, :], self.tensor[..., p, :]

    @classmethod
    def compose(cls, point_query: Tensor, element_query: Tensor) -> "HiQuery":
        eq = nm.reshape(element_query, element_query.shape[:-1] + (1, element_query.shape[-1]))
        return cls(nm.concat([point_query, eq], axis=-2))


@dataclass
class DecoderState:
    hiquery: HiQuery
    anchors: Tensor
    anchor_masks: np.ndarray
    layer_index: int = 0


@dataclass
class Predictions:
    class_logits: Tensor
    points: Tensor
    mask_logits: Tensor
    point_repr: Tensor
    element_repr: Tensor
    # what the layer consumed, kept for inspection
    anchors: np.ndarray = field(repr=False, default=None)
    anchor_masks: np.ndarray = field(repr=False, default=None)
    element_attention: np.ndarray = field(repr=False, default=None)
    sample_locations: np.ndarray = field(repr=False, default=None)


def sine_position_embedding(h: int, w: int, c: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2D sinusoidal embedding (h, w, c): first half encodes rows, second half columns."""
    half = c // 2
    y = (np.arange(h) + 0.5) / h * 2 * math.pi
    x = (np.arange(w) + 0.5) / w * 2 * math.pi
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)

    def enc(v):
        pos = v[:, None] / dim_t
        out = np.empty_like(pos)
        out[:, 0::2] = np.sin(pos[:, 0::2])
        out[:, 1::2] = np.cos(pos[:, 1::2])
        return out

    ey, ex = enc(y), enc(x)
    return np.concatenate([np.broadcast_to(ey[:, None, :], (h, w, half)), np.broadcast_to(ex[None, :, :], (h, w, half))], axis=-1)


# ---------------------------------------------------------------- building blocks


def ffn(x: Tensor, w1, b1, w2, b2) -> Tensor:
    return nm.linear(nm.relu(nm.linear(x, w1, b1)), w2, b2)


def multihead_attention(x: Tensor, wq, bq, wk, bk, wv, bv, wo, bo, heads: int) -> Tensor:
    """Self-attention over the second-to-last axis of x (..., T, C)."""
    lead = x.shape[:-2]
    t, c = x.shape[-2:]
    d = c // heads
    n = len(lead)
    split = lead + (t, heads, d)
    to_heads = tuple(range(n)) + (n + 1, n, n + 2)

    def project(w, b):
        return nm.transpose(nm.reshape(nm.linear(x, w, b), split), to_heads)

    q, k, v = project(wq, bq), project(wk, bk), project(wv, bv)
    att = nm.softmax(nm.matmul(q, nm.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d)), axis=-1)
    out = nm.reshape(nm.transpose(nm.matmul(att, v), to_heads), lead + (t, c))
    return nm.linear(out, wo, bo)


def _weighted_pool(x: Tensor, raw_weights: Tensor) -> Tensor:
    """softmax(raw_weights) combination along the point axis: (..., P, C) -> (..., C)."""
    w = nm.softmax(raw_weights, axis=-1)
    p = raw_weights.shape[-1]
    return nm.reshape(nm.matmul(nm.reshape(w, (1, p)), x), x.shape[:-2] + (x.shape[-1],))


# ---------------------------------------------------------------- interactor ops


def point_position_embed(anchors: Tensor, w_b: Tensor, b_b: Tensor, point_query: Tensor) -> tuple[Tensor, Tensor]:
    """Position embedding of the anchors and the position-aware point query."""
    pos = nm.linear(anchors, w_b, b_b)
    return pos, nm.add(point_query, pos)


def sampling_offsets_weights(query: Tensor, w_o, b_o, w_a, b_a, num_samples: int) -> tuple[Tensor, Tensor]:
    """Offsets (..., K, 2) in grid cells as (dx, dy), and softmax weights (..., K)."""
    offsets = nm.reshape(nm.linear(query, w_o, b_o), query.shape[:-1] + (num_samples, 2))
    weights = nm.softmax(nm.linear(query, w_a, b_a), axis=-1)
    return offsets, weights


def anchor_grid_coords(anchors: Tensor, h: int, w: int) -> Tensor:
    """Normalized (x, y) anchors -> continuous (row, col) grid coordinates."""
    scale = np.array([h, w], dtype=anchors.data.dtype)
    swapped = nm.concat([anchors[..., 1:2], anchors[..., 0:1]], axis=-1)
    return swapped * scale - 0.5


def deformable_point_extract(bev: Tensor, anchors: Tensor, offsets: Tensor, weights: Tensor,
                             w_v: Tensor, b_v: Tensor, point_query: Tensor) -> tuple[Tensor, np.ndarray]:
    """Weighted bilinear samples of the projected BEV around each anchor, plus the point query.

    Shapes: bev (..., H, W, C), anchors (..., E, P, 2), offsets (..., E, P, K, 2),
    weights (..., E, P, K). Returns (..., E, P, C) and the (row, col) sample locations.
    """
    h, w, c = bev.shape[-3:]
    e, p, k = weights.shape[-3:]
    lead = bev.shape[:-3]
    values = nm.linear(bev, w_v, b_v)
    base = anchor_grid_coords(anchors, h, w)
    base = nm.broadcast_to(nm.reshape(base, lead + (e, p, 1, 2)), lead + (e, p, k, 2))
    delta = nm.concat([offsets[..., 1:2], offsets[..., 0:1]], axis=-1)
    loc = base + delta
    sampled = nm.bilinear_gather(values, nm.reshape(loc, lead + (e * p * k, 2)))
    sampled = nm.reshape(sampled, lead + (e, p, k, c))
    fused = nm.matmul(nm.reshape(weights, lead + (e, p, 1, k)), sampled)
    fused = nm.reshape(fused, lead + (e, p, c))
    return nm.add(fused, point_query), loc.data


def element_position_embed(point_pos: Tensor, w_pe: Tensor) -> Tensor:
    return _weighted_pool(point_pos, w_pe)


def effective_masks(anchor_masks: np.ndarray) -> np.ndarray:
    """Anchor masks with all-zero rows replaced by all-ones."""
    m = np.asarray(anchor_masks, dtype=np.float64)
    empty = m.sum(axis=-1, keepdims=True) == 0
    return np.where(empty, 1.0, m)


def masked_element_extract(bev: Tensor, bev_pos: np.ndarray, element_query: Tensor, element_pos: Tensor,
                           anchor_masks: np.ndarray, scale: bool = False) -> tuple[Tensor, np.ndarray]:
    """Masked single-head attention of each element query over the BEV cells.

    The binary mask multiplies the softmax output (no renormalization).
    bev (..., H, W, C); element_query/element_pos (..., E, C); anchor_masks (..., E, H*W).
    Returns (..., E, C) and the masked attention rows.
    """
    h, w, c = bev.shape[-3:]
    lead = bev.shape[:-3]
    x = nm.reshape(bev, lead + (h * w, c))
    x_pos = nm.add(x, nm.reshape(Tensor(bev_pos, dtype=bev.data.dtype), (h * w, c)))
    q = nm.add(element_query, element_pos)
    logits = nm.matmul(q, nm.swapaxes(x_pos, -1, -2))
    if scale:
        logits = logits * (1.0 / math.sqrt(c))
    mask = effective_masks(anchor_masks).astype(bev.data.dtype)
    attn = nm.mul(nm.softmax(logits, axis=-1), mask)
    out = nm.matmul(attn, x)
    return nm.add(out, element_query), attn.data


def hybrider_refine(point_feats: Tensor, element_feats: Tensor, params: dict, heads: int) -> tuple[Tensor, Tensor]:
    """Point branch: self-attention over the P points of each element + FFN. Element branch: FFN."""
    g = params
    x = point_feats
    x = x + multihead_attention(nm.layer_norm(x, g["pt_attn.ln.g"], g["pt_attn.ln.b"]),
                                g["pt_attn.wq"], g["pt_attn.bq"], g["pt_attn.wk"], g["pt_attn.bk"],
                                g["pt_attn.wv"], g["pt_attn.bv"], g["pt_attn.wo"], g["pt_attn.bo"], heads)
    x = x + ffn(nm.layer_norm(x, g["pt_ffn.ln.g"], g["pt_ffn.ln.b"]),
                g["pt_ffn.w1"], g["pt_ffn.b1"], g["pt_ffn.w2"], g["pt_ffn.b2"])
    y = element_feats
    y = y + ffn(nm.layer_norm(y, g["el_ffn.ln.g"], g["el_ffn.ln.b"]),
                g["el_ffn.w1"], g["el_ffn.b1"], g["el_ffn.w2"], g["el_ffn.b2"])
    return x, y


def cross_level_update(point_feats: Tensor, element_feats: Tensor, w_cp: Tensor) -> tuple[Tensor, Tensor, HiQuery]:
    """Point query += copy of its element feature; element query += weighted sum of its points."""
    lead_e = element_feats.shape[:-1]
    c = element_feats.shape[-1]
    p = point_feats.shape[-2]
    copied = nm.broadcast_to(nm.reshape(element_feats, lead_e + (1, c)), lead_e + (p, c))
    q_p = nm.add(point_feats, copied)
    q_e = nm.add(element_feats, _weighted_pool(point_feats, w_cp))
    return q_p, q_e, HiQuery.compose(q_p, q_e)


def heads(hiquery: HiQuery, bev: Tensor, params: dict) -> Predictions:
    """Class, point and mask heads of one layer.

    Each head is Linear-ReLU-Linear followed by its functional layer. The
    first-linear outputs of the point and mask heads are kept for the
    consistency loss.
    """
    g = params
    h, w, c = bev.shape[-3:]
    lead = bev.shape[:-3]
    q = HiQuery(nm.layer_norm(hiquery.tensor, g["head.ln.g"], g["head.ln.b"]))
    q_p, q_e = q.decompose()

    cls_hidden = nm.relu(ffn(q_e, g["cls.w1"], g["cls.b1"], g["cls.w2"], g["cls.b2"]))
    class_logits = nm.linear(cls_hidden, g["cls.w3"], g["cls.b3"])

    point_repr = nm.linear(q_p, g["pts.w1"], g["pts.b1"])
    pts_hidden = nm.relu(nm.linear(nm.relu(point_repr), g["pts.w2"], g["pts.b2"]))
    points = nm.sigmoid(nm.linear(pts_hidden, g["pts.w3"], g["pts.b3"]))

    element_repr = nm.linear(q_e, g["msk.w1"], g["msk.b1"])
    mask_embed = nm.linear(nm.relu(element_repr), g["msk.w2"], g["msk.b2"])
    x = nm.reshape(bev, lead + (h * w, c))
    mask_logits = nm.matmul(mask_embed, nm.swapaxes(x, -1, -2))
    return Predictions(class_logits, points, mask_logits, point_repr, element_repr)


# ---------------------------------------------------------------- parameters


def _xavier(rng, fan_in, fan_out, shape=None):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def init_params(cfg: DecoderConfig, seed: int, store: ParamStore | None = None) -> ParamStore:
    store = store if store is not None else ParamStore()
    rng = nm.make_rng(seed, 1)
    E, P, C, K, F = cfg.num_elements, cfg.num_points, cfg.channels, cfg.num_samples, cfg.ffn_dim

    store.add("query.hiquery", rng.normal(0.0, 1.0, size=(E, P + 1, C)))
    u = np.clip(rng.uniform(0.0, 1.0, size=(E, P, 2)), 1e-3, 1 - 1e-3)
    store.add("query.anchor_logits", np.log(u / (1 - u)))

    def lin(prefix, fan_in, fan_out, zero=False):
        store.add(prefix[0], np.zeros((fan_in, fan_out)) if zero else _xavier(rng, fan_in, fan_out))
        store.add(prefix[1], np.zeros(fan_out))

    def ln(prefix):
        store.add(prefix + ".g", np.ones(C))
        store.add(prefix + ".b", np.zeros(C))

    angles = 2 * np.pi * np.arange(K) / K
    ring = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    ring = ring / np.abs(ring).max(axis=-1, keepdims=True)

    for layer in range(cfg.num_layers):
        pre = f"layers.{layer}."
        lin((pre + "w_b", pre + "b_b"), 2, C)
        lin((pre + "w_o", pre + "b_o"), C, 2 * K, zero=True)
        store[pre + "b_o"].data[:] = ring.reshape(-1)
        lin((pre + "w_a", pre + "b_a"), C, K, zero=True)
        lin((pre + "w_v", pre + "b_v"), C, C)
        store.add(pre + "w_pe", np.zeros(P))
        store.add(pre + "w_cp", np.zeros(P))
        store.add(pre + "w_ps", np.zeros(P))
        for blk in ("pt_attn", "attn"):
            ln(pre + blk + ".ln")
            for m in ("q", "k", "v", "o"):
                lin((f"{pre}{blk}.w{m}", f"{pre}{blk}.b{m}"), C, C)
        for blk in ("pt_ffn", "el_ffn", "ffn"):
            ln(pre + blk + ".ln")
            lin((pre + blk + ".w1", pre + blk + ".b1"), C, F)
            lin((pre + blk + ".w2", pre + blk + ".b2"), F, C)
        ln(pre + "head.ln")
        for hd, out in (("cls", cfg.num_classes), ("pts", 2)):
            lin((f"{pre}{hd}.w1", f"{pre}{hd}.b1"), C, C)
            lin((f"{pre}{hd}.w2", f"{pre}{hd}.b2"), C, C)
            lin((f"{pre}{hd}.w3", f"{pre}{hd}.b3"), C, out)
        # rare positives: start class scores low
        store[pre + "cls.b3"].data[:] = -math.log((1 - 0.01) / 0.01)
        lin((pre + "msk.w1", pre + "msk.b1"), C, C)
        lin((pre + "msk.w2", pre + "msk.b2"), C, C)
    return store


def layer_params(store: ParamStore, layer: int) -> dict[str, Tensor]:
    pre = f"layers.{layer}."
    return {name[len(pre):]: t for name, t in store.items() if name.startswith(pre)}


# ---------------------------------------------------------------- full decoder


def decoder_layer(state: DecoderState, bev: Tensor, bev_pos: np.ndarray, g: dict, cfg: DecoderConfig) -> tuple[HiQuery, Predictions, dict]:
    """One hybrid layer; returns the new hybrid query, its predictions and interactor internals."""
    q_p, q_e = state.hiquery.decompose()
    pos_p, q_hat_p = point_position_embed(state.anchors, g["w_b"], g["b_b"], q_p)
    offsets, weights = sampling_offsets_weights(q_hat_p, g["w_o"], g["b_o"], g["w_a"], g["b_a"], cfg.num_samples)
    x_p, locations = deformable_point_extract(bev, state.anchors, offsets, weights, g["w_v"], g["b_v"], q_p)
    pos_e = element_position_embed(pos_p, g["w_pe"])
    x_e, attention = masked_element_extract(bev, bev_pos, q_e, pos_e, state.anchor_masks, cfg.scale_mask_logits)
    r_p, r_e = hybrider_refine(x_p, x_e, g, cfg.self_attn_heads)
    if cfg.cross_level_update:
        _, _, hq = cross_level_update(r_p, r_e, g["w_cp"])
    else:
        hq = HiQuery.compose(r_p, r_e)

    t = hq.tensor
    shape = t.shape
    e, p1, c = shape[-3:]
    tokens = nm.reshape(t, shape[:-3] + (e * p1, c))
    tokens = tokens + multihead_attention(nm.layer_norm(tokens, g["attn.ln.g"], g["attn.ln.b"]),
                                          g["attn.wq"], g["attn.bq"], g["attn.wk"], g["attn.bk"],
                                          g["attn.wv"], g["attn.bv"], g["attn.wo"], g["attn.bo"], cfg.self_attn_heads)
    tokens = tokens + ffn(nm.layer_norm(tokens, g["ffn.ln.g"], g["ffn.ln.b"]),
                          g["ffn.w1"], g["ffn.b1"], g["ffn.w2"], g["ffn.b2"])
    hq = HiQuery(nm.reshape(tokens, shape))
    preds = heads(hq, bev, g)
    preds.anchors = state.anchors.data
    preds.anchor_masks = effective_masks(state.anchor_masks) if state.layer_index == 0 else np.asarray(state.anchor_masks, dtype=np.float64)
    preds.element_attention = attention
    preds.sample_locations = locations
    return hq, preds, {"weights": weights.data, "offsets": offsets.data}


def initial_state(store: ParamStore, cfg: DecoderConfig, lead: tuple = ()) -> DecoderState:
    hq = store["query.hiquery"]
    anchors = nm.sigmoid(store["query.anchor_logits"])
    if lead:
        hq = nm.broadcast_to(hq, lead + hq.shape)
        anchors = nm.broadcast_to(anchors, lead + anchors.shape)
    masks = np.ones(lead + (cfg.num_elements, cfg.grid_h * cfg.grid_w))
    return DecoderState(HiQuery(hq), anchors, masks, 0)


def decoder_forward(store: ParamStore, cfg: DecoderConfig, bev: Tensor, detach_anchors: bool = True) -> list[Predictions]:
    """Run all layers on BEV features (..., H, W, C); returns one Predictions per layer."""
    h, w, c = bev.shape[-3:]
    if (h, w, c) != (cfg.grid_h, cfg.grid_w, cfg.channels):
        raise nm.ShapeError(f"BEV features {bev.shape[-3:]} do not match config grid ({cfg.grid_h}, {cfg.grid_w}, {cfg.channels})")
    bev_pos = sine_position_embedding(h, w, c)
    state = initial_state(store, cfg, bev.shape[:-3])
    outputs = []
    for layer in range(cfg.num_layers):
        hq, preds, _ = decoder_layer(state, bev, bev_pos, layer_params(store, layer), cfg)
        outputs.append(preds)
        anchors = preds.points.detach() if detach_anchors else preds.points
        masks = (preds.mask_logits.data > math.log(cfg.mask_threshold / (1 - cfg.mask_threshold))).astype(np.float64)
        state = DecoderState(hq, anchors, masks, layer + 1)
    return outputs
