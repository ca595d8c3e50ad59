"""Central finite-difference checks against the tape gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, backward

REL_FLOOR = 1e-3


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor).

    The floor turns the check into an absolute one for gradients much smaller
    than one, where the difference quotient is dominated by round-off.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(fn: Callable[[], Tensor], params: Mapping[str, Tensor], samples: int | None = None,
                    seed: int = 0, step_scale: float = 1e-6) -> dict:
    """Compare autodiff and central differences for scalar ``fn()``.

    ``samples`` entries are drawn uniformly over all parameter elements
    (all of them when None). Returns per-sample records and the worst
    relative error.
    """
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        out = fn()
    backward(out)
    tape.clear()

    coords = [(name, i) for name, p in params.items() for i in range(p.size)]
    if samples is not None and samples < len(coords):
        rng = np.random.default_rng(seed)
        coords = [coords[j] for j in rng.choice(len(coords), samples, replace=False)]

    records = []
    for name, i in coords:
        p = params[name]
        flat = p.data.reshape(-1)
        orig = flat[i]
        h = step_scale * (1.0 + abs(orig))
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        analytic = float(p.grad.reshape(-1)[i])
        records.append((name, i, analytic, numeric, relative_error(analytic, numeric)))
    worst = max((r[4] for r in records), default=0.0)
    return {"records": records, "max_rel_error": worst, "count": len(records)}
