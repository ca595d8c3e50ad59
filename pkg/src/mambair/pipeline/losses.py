"""Reconstruction losses, mean-reduced over every element."""
from __future__ import annotations

from ..tensor import Tensor, as_tensor, mean, sqrt, sub, tabs

CHARBONNIER_EPS = 1e-3


def _check(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")


def loss_l1(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    _check(pred, target)
    return mean(tabs(sub(pred, target)))


def loss_charbonnier(pred, target, eps: float = CHARBONNIER_EPS) -> Tensor:
    """mean(sqrt((pred - target)^2 + eps^2))."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    pred, target = as_tensor(pred), as_tensor(target)
    _check(pred, target)
    diff = sub(pred, target)
    return mean(sqrt(diff * diff + eps * eps))
