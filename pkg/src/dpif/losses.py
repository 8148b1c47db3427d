"""Cross-spectrum, pose-correction and joint losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dpif import ops
from dpif.tensor import ShapeError, Tensor

DEFAULT_LAMBDA = 1e-5


@dataclass(frozen=True)
class LossConfig:
    lam: float = DEFAULT_LAMBDA
    detach_visible: bool = False

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"loss weight must be non-negative, got {self.lam}")


def cross_spectrum_loss(thermal_embeddings: Tensor, labels, head) -> Tensor:
    """Cross-entropy of thermal embeddings under the visible classifier."""
    logits = head.classify(thermal_embeddings)
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if y.shape != logits.shape:
        raise ShapeError(f"labels {y.shape} do not match classifier output {logits.shape}")
    return ops.softmax_cross_entropy(logits, y)


def pose_correction_loss(visible_embeddings: Tensor, thermal_embeddings: Tensor,
                         detach_visible: bool = False) -> Tensor:
    """Sum over pairs of the squared distance between paired representations."""
    if visible_embeddings.shape != thermal_embeddings.shape:
        raise ShapeError(f"pose-correction pairs differ in shape: {visible_embeddings.shape} "
                         f"vs {thermal_embeddings.shape}")
    v = visible_embeddings.detach() if detach_visible else visible_embeddings
    return ops.sum_squared_error(v, thermal_embeddings)


def joint_loss(l_c: Tensor, l_p: Tensor, lam: float) -> Tensor:
    if not lam >= 0:
        raise ValueError(f"loss weight must be non-negative, got {lam}")
    for name, t in (("cross-spectrum", l_c), ("pose-correction", l_p)):
        if t.data.size != 1 or not math.isfinite(float(t.data)):
            raise ValueError(f"{name} loss must be a finite scalar")
    if lam == 0:
        return l_c
    return ops.add(l_c, ops.scale(l_p, lam))
