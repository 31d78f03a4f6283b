"""Point/element consistency: pooled point representations should pick out their own element."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nm
from .numerics import Tensor


def pseudo_element(point_repr: Tensor, w_ps: Tensor) -> Tensor:
    """Softmax(w_ps)-weighted sum over the P point representations: (..., E, P, C) -> (..., E, C)."""
    w = nm.softmax(w_ps, axis=-1)
    p = w_ps.shape[-1]
    pooled = nm.matmul(nm.reshape(w, (1, p)), point_repr)
    return nm.reshape(pooled, point_repr.shape[:-2] + (point_repr.shape[-1],))


def similarity_logits(pseudo: Tensor, element_repr: Tensor) -> Tensor:
    c = element_repr.shape[-1]
    return nm.matmul(pseudo, nm.swapaxes(element_repr, -1, -2)) * (1.0 / math.sqrt(c))


def consistency_loss(pseudo: Tensor, element_repr: Tensor) -> Tensor:
    """Mean BCE between sigmoid(similarity / sqrt(C)) and the E x E identity."""
    logits = similarity_logits(pseudo, element_repr)
    e = logits.shape[-1]
    eye = np.eye(e, dtype=logits.data.dtype)
    return nm.mean(nm.softplus(logits) - logits * eye)
