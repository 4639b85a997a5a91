"""
Composite classification loss: cross-entropy plus an alpha-weighted squared
error between the one-hot target and the softmax output.

    L = mean_b [ -sum_i y_i log p_i + alpha * sum_i (y_i - p_i)^2 ]
"""
from typing import Optional

import numpy as np

from ..core.tensor import Tensor, ensure_finite, softmax
from ..errors import ShapeError
from ..schemas.network import LossConfig

LOG_CLAMP = 1e-12


def one_hot(labels: Tensor, class_count: int) -> Tensor:
    """Accepts class indices [B] or one-hot rows [B, C]."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != class_count:
            raise ShapeError(f"one-hot labels have {labels.shape[1]} columns, expected {class_count}")
        return labels.astype(np.float64)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be [B] or [B, C], got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ShapeError(f"label outside [0, {class_count - 1}]")
    y = np.zeros((labels.shape[0], class_count))
    y[np.arange(labels.shape[0]), labels.astype(np.int64)] = 1.0
    return y


def _prepare(logits: Tensor, labels: Tensor) -> tuple[Tensor, Tensor]:
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, C], got {logits.shape}")
    y = one_hot(labels, logits.shape[1])
    if y.shape[0] != logits.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for {logits.shape[0]} logit rows")
    return softmax(logits, axis=1), y


def loss(logits: Tensor, labels: Tensor, cfg: Optional[LossConfig] = None) -> float:
    cfg = cfg or LossConfig()
    p, y = _prepare(logits, labels)
    ce = -(y * np.log(np.maximum(p, LOG_CLAMP))).sum(axis=1)
    se = ((y - p) ** 2).sum(axis=1)
    return float(np.mean(ce + cfg.alpha * se))


def loss_grad(logits: Tensor, labels: Tensor, cfg: Optional[LossConfig] = None) -> Tensor:
    """Gradient of `loss` with respect to the logits."""
    cfg = cfg or LossConfig()
    p, y = _prepare(logits, labels)
    v = 2.0 * cfg.alpha * (p - y)
    # softmax Jacobian applied to v: p * (v - <v, p>)
    se_grad = p * (v - (v * p).sum(axis=1, keepdims=True))
    grad = (p - y + se_grad) / logits.shape[0]
    return ensure_finite(grad.astype(logits.dtype, copy=False), "loss_grad")


def accuracy(logits: Tensor, labels: Tensor) -> float:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    return float(np.mean(logits.argmax(axis=1) == labels))
