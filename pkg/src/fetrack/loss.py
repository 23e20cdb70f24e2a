"""Training objective: hinged classification MSE plus IoU regression MSE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, mean, relu, square
from .errors import ShapeError

FOREGROUND_THRESHOLD = 0.05


@dataclass
class LossReport:
    L_total: float
    L_cls: float
    L_b: float
    beta: float

    def row(self, step):
        return f"{step},{self.L_total!r},{self.L_cls!r},{self.L_b!r}"


def hinge_residual(s: float, z: float) -> float:
    """``s - z`` on the target (z > 0.05), ``max(0, s)`` on background."""
    return s - z if z > FOREGROUND_THRESHOLD else max(0.0, s)


def classification_loss(score, label) -> Tensor:
    """Mean over cells of the squared hinge residual; ``label`` may be a GaussianLabel or array."""
    score = as_tensor(score)
    z = np.asarray(getattr(label, "z", label), dtype=np.float64)
    if score.size != z.size or score.shape[-z.ndim:] != z.shape:
        raise ShapeError(f"score map {score.shape} vs label {z.shape}")
    z = z.reshape(score.shape)
    fg = (z > FOREGROUND_THRESHOLD).astype(np.float64)
    residual = (score - z) * fg + relu(score) * (1.0 - fg)
    return mean(square(residual))


def bbox_loss(predicted, target) -> Tensor:
    predicted = as_tensor(predicted)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ShapeError(f"{predicted.shape[0] if predicted.ndim else 1} predictions for {target.size} targets")
    return mean(square(predicted - target))


def total_loss(l_cls, l_b, beta=1.0):
    return beta * l_cls + l_b
