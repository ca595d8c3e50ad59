"""Four-direction selective scanning of 2-D feature maps.

A map of shape (..., H, W, C) is flattened into token sequences along

    0  row-major from the top-left
    1  column-major from the top-left
    2  row-major reversed (from the bottom-right)
    3  column-major reversed

each sequence is scanned with its own selective parameters, mapped back to
pixel order and the results are summed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ssm import selective_scan
from .tensor import (Tensor, add, as_tensor, concat, exp, getslice, linear, neg, reshape, softplus,
                     split, take, transpose)

DIRECTION_SETS = {1: (0,), 2: (0, 2), 4: (0, 1, 2, 3)}


def scan_order(H: int, W: int, direction: int) -> np.ndarray:
    """order[p] = flat pixel index (h*W + w) visited at sequence position p."""
    grid = np.arange(H * W).reshape(H, W)
    if direction == 0:
        return grid.ravel()
    if direction == 1:
        return grid.T.ravel()
    if direction == 2:
        return grid.ravel()[::-1].copy()
    if direction == 3:
        return grid.T.ravel()[::-1].copy()
    raise ValueError(f"direction must be 0..3, got {direction}")


@dataclass
class DirectionalSequences:
    sequences: list  # Tensors of shape (..., H*W, C)
    orders: list  # np.ndarray, sequence position -> pixel index
    inverses: list  # np.ndarray, pixel index -> sequence position
    height: int
    width: int


def flatten_directions(feature, directions=(0, 1, 2, 3)) -> DirectionalSequences:
    feature = as_tensor(feature)
    *lead, H, W, C = feature.shape
    if H < 1 or W < 1:
        raise ValueError("feature map must be at least 1x1")
    tokens = reshape(feature, tuple(lead) + (H * W, C))
    orders = [scan_order(H, W, d) for d in directions]
    inverses = [np.argsort(o) for o in orders]
    seqs = [take(tokens, o, axis=-2) for o in orders]
    return DirectionalSequences(seqs, orders, inverses, H, W)


def merge_directions(outputs, seqs: DirectionalSequences) -> Tensor:
    """Undo each direction's permutation and sum in direction order."""
    if len(outputs) != len(seqs.inverses):
        raise ValueError(f"expected {len(seqs.inverses)} outputs, got {len(outputs)}")
    L = seqs.height * seqs.width
    merged = None
    for out, inv in zip(outputs, seqs.inverses):
        out = as_tensor(out)
        if out.shape[-2] != L:
            raise ValueError(f"output has length {out.shape[-2]}, expected {L}")
        pix = take(out, inv, axis=-2)
        merged = pix if merged is None else add(merged, pix)
    *lead, _, C = merged.shape
    return reshape(merged, tuple(lead) + (seqs.height, seqs.width, C))


def init_scan_params(channels: int, state: int, directions: int, rng: np.random.Generator,
                     shared: bool = False, dt_min: float = 1e-3, dt_max: float = 1e-1) -> dict:
    """Selective-projection parameters, stacked over directions unless ``shared``."""
    from .ssm import default_a_log, inverse_softplus

    k = () if shared else (directions,)
    bound = 1.0 / np.sqrt(channels)
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), k + (channels,)))
    return {
        "w_delta": rng.uniform(-bound, bound, k + (channels, channels)),
        "b_delta": inverse_softplus(dt),
        "w_B": rng.uniform(-bound, bound, k + (channels, state)),
        "w_C": rng.uniform(-bound, bound, k + (channels, state)),
        "a_log": np.broadcast_to(default_a_log(channels, state), k + (channels, state)).copy(),
        "D": np.ones(k + (channels,)),
    }


def _gather_index(orders: list, L: int) -> np.ndarray:
    return np.concatenate([d * L + np.asarray(o) for d, o in enumerate(orders)])


def ssm2d_forward(feature, params: dict, directions: int = 4, impl: str = "fused") -> Tensor:
    """Flatten along ``directions`` scan orders, scan each, merge by summation.

    ``params`` holds w_delta, b_delta, w_B, w_C, a_log, D, each either with a
    leading direction axis (independent parameters) or without (shared).
    """
    if directions not in DIRECTION_SETS:
        raise ValueError(f"scan_directions must be one of {sorted(DIRECTION_SETS)}")
    feature = as_tensor(feature)
    p = {k: as_tensor(v) for k, v in params.items()}
    *lead, H, W, C = feature.shape
    lead = tuple(lead)
    L = H * W
    N = p["w_B"].shape[-1]
    K = directions
    dirs = DIRECTION_SETS[K]
    orders = [scan_order(H, W, d) for d in dirs]
    inverses = [np.argsort(o) for o in orders]
    shared = p["w_delta"].ndim == 2
    if not shared and p["w_delta"].shape[0] != K:
        raise ValueError(f"parameters stacked for {p['w_delta'].shape[0]} directions, asked for {K}")

    tokens = reshape(feature, lead + (L, C))
    x_dirs = reshape(take(tokens, np.concatenate(orders), axis=-2), lead + (K, L, C))
    M = C + 2 * N
    if shared:
        w_cat = concat([p["w_delta"], p["w_B"], p["w_C"]], axis=-1)  # (C, M)
        proj = linear(x_dirs, w_cat)  # (..., K, L, M)
    else:
        # per-token maps commute with the permutation: project once, then gather
        w_cat = concat([p["w_delta"], p["w_B"], p["w_C"]], axis=-1)  # (K, C, M)
        w_cat = reshape(transpose(w_cat, (1, 0, 2)), (C, K * M))
        proj = reshape(linear(tokens, w_cat), lead + (L, K, M))
        n = len(lead)
        proj = transpose(proj, tuple(range(n)) + (n + 1, n, n + 2))
        proj = reshape(proj, lead + (K * L, M))
        proj = reshape(take(proj, _gather_index(orders, L), axis=-2), lead + (K, L, M))
    d_raw, B, Cm = split(proj, (C, N, N), axis=-1)
    b_delta = p["b_delta"] if shared else reshape(p["b_delta"], (K, 1, C))
    delta = softplus(add(d_raw, b_delta))
    A = neg(exp(p["a_log"]))
    y = selective_scan(x_dirs, delta, A, B, Cm, p["D"], impl=impl)  # (..., K, L, C)

    y = reshape(y, lead + (K * L, C))
    y = reshape(take(y, _gather_index(inverses, L), axis=-2), lead + (K, L, C))
    merged = None
    for k in range(K):
        part = getslice(y, (Ellipsis, k, slice(None), slice(None)))
        merged = part if merged is None else add(merged, part)
    return reshape(merged, lead + (H, W, C))


def ssm2d_cost(H: int, W: int, channels: int, state: int, directions: int = 4) -> int:
    """Number of state updates performed by one :func:`ssm2d_forward` call."""
    return directions * H * W * channels * state
