"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def _to_f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 2e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, f32_state: bool = False) -> AdamState:
    """Update ``params`` (name -> Tensor) in place.

    With ``f32_state`` the parameters and moments are rounded to float32
    after the update, so a float32 checkpoint captures them exactly and a
    resumed run continues bit-for-bit.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new = p.data - update
        if f32_state:
            new, m, v = _to_f32(new), _to_f32(m), _to_f32(v)
        p.data[...] = new
        state.m[name] = m
        state.v[name] = v
    return state


def lr_at(step: int, base_lr: float, total_steps: int, milestones=(0.5, 0.75, 0.9)) -> float:
    """Learning rate halved at each milestone fraction of ``total_steps`` (``step`` is 0-based)."""
    passed = sum(step >= int(round(f * total_steps)) for f in milestones)
    return base_lr * 0.5 ** passed
