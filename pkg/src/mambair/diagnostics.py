"""Effective receptive fields, channel activation statistics and complexity scaling."""
from __future__ import annotations

import csv
import gc
import io
import time
import tracemalloc
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .blocks import ModelState, mambair_forward
from .tensor import Tape, Tensor, backward, conv2d, gelu

ERF_SEEDS = 8
NEAR_ZERO = 1e-3
BENCH_HEADER = ("side", "pixels", "variant", "ms_median", "bytes")
BENCH_VARIANTS = ("ssm", "full_attention")


# --- effective receptive field ---------------------------------------------

@dataclass
class ErfMap:
    values: np.ndarray       # (H, W), max 1
    raw: np.ndarray          # (H, W), before normalisation
    input_size: tuple
    mode: str
    meta: dict = field(default_factory=dict)

    def support(self, threshold: float = 0.0) -> np.ndarray:
        return self.raw > threshold


def _erf_gradient(model: Callable, image: np.ndarray) -> np.ndarray:
    x = Tensor(image, requires_grad=True)
    with Tape() as tape:
        out = model(x)
        H, W = out.shape[-3], out.shape[-2]
        centre = out[..., H // 2, W // 2, :].sum()
    if centre._tape is None:
        raise ValueError("model output does not depend differentiably on its input")
    backward(centre)
    tape.clear()
    return np.abs(x.grad).sum(axis=-1)


def compute_erf(model: Callable, input_size: tuple, channels: int = 3, mode: str = "gray",
                seed: int = 0, meta: dict | None = None) -> ErfMap:
    """|d(centre output, summed over channels) / d input|, summed over input channels.

    ``mode="gray"`` feeds a constant 0.5 image; ``mode="random"`` averages the
    map over eight seeded uniform images.
    """
    H, W = input_size
    if mode == "gray":
        raw = _erf_gradient(model, np.full((H, W, channels), 0.5))
    elif mode == "random":
        rng = np.random.default_rng(seed)
        raw = np.mean([_erf_gradient(model, rng.random((H, W, channels))) for _ in range(ERF_SEEDS)], axis=0)
    else:
        raise ValueError(f"unknown ERF mode {mode!r}")
    peak = raw.max()
    values = raw / peak if peak > 0 else raw.copy()
    return ErfMap(values, raw, (H, W), mode, dict(meta or {}))


def model_fn(state: ModelState) -> Callable:
    return lambda x: mambair_forward(x, state)


def init_conv_stack(layers: int, channels: int, in_channels: int = 3, seed: int = 0) -> list:
    """Weights for a plain stack of 3x3 convolutions (GELU in between)."""
    rng = np.random.default_rng(seed)
    widths = [in_channels] + [channels] * (layers - 1) + [in_channels]
    out = []
    for cin, cout in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(9 * cin)
        out.append((Tensor(rng.uniform(-bound, bound, (3, 3, cin, cout))), Tensor(np.zeros(cout))))
    return out


def conv_stack_forward(x, weights: list) -> Tensor:
    for i, (w, b) in enumerate(weights):
        x = conv2d(x, w, b)
        if i < len(weights) - 1:
            x = gelu(x)
    return x


def reach_box(size: tuple, reach: int) -> np.ndarray:
    """Mask of the (2*reach+1)^2 box around the centre pixel."""
    H, W = size
    mask = np.zeros((H, W), dtype=bool)
    cy, cx = H // 2, W // 2
    mask[max(cy - reach, 0):cy + reach + 1, max(cx - reach, 0):cx + reach + 1] = True
    return mask


def erf_pgm(erf: ErfMap, gamma: float = 0.5) -> np.ndarray:
    """Dark = strong influence, as an (H, W, 1) image in [0, 1]."""
    return (1.0 - np.clip(erf.values, 0.0, 1.0) ** gamma)[..., None]


def erf_csv(erf: ErfMap) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", "col", "value", "raw"])
    for (r, c), v in np.ndenumerate(erf.values):
        writer.writerow([r, c, repr(float(v)), repr(float(erf.raw[r, c]))])
    return buf.getvalue()


# --- channel activations ----------------------------------------------------

@dataclass
class ChannelStats:
    activations: np.ndarray
    near_zero_fraction: float
    threshold: float


def activation_stats(features, threshold: float = NEAR_ZERO) -> ChannelStats:
    """ReLU then global average pooling per channel over all leading and spatial axes."""
    feats = np.asarray(getattr(features, "data", features), dtype=np.float64)
    acts = np.maximum(feats, 0.0).reshape(-1, feats.shape[-1]).mean(axis=0)
    peak = acts.max()
    if peak <= 0:
        return ChannelStats(acts, 1.0, threshold)
    return ChannelStats(acts, float(np.mean(acts < threshold * peak)), threshold)


def channel_activation_stats(state: ModelState, inputs, threshold: float = NEAR_ZERO) -> ChannelStats:
    """Statistics of the last VSSM output over a batch of input images."""
    taps: list = []
    mambair_forward(Tensor(np.asarray(inputs)), state, taps=taps)
    if not taps:
        raise ValueError("model has no VSSM layers")
    return activation_stats(taps[-1], threshold)


def channel_csv(stats: ChannelStats) -> str:
    lines = ["channel,activation"] + [f"{i},{float(a)!r}" for i, a in enumerate(stats.activations)]
    lines.append(f"# near_zero_fraction={stats.near_zero_fraction!r} threshold={stats.threshold!r}")
    return "\n".join(lines) + "\n"


# --- full-attention baseline ---------------------------------------------------

def init_attention(channels: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(channels)
    return {name: Tensor(rng.uniform(-bound, bound, (channels, channels))) for name in ("q", "k", "v", "o")}


def full_attention_forward(x, weights: dict, chunk: int = 1024) -> Tensor:
    """Single-head scaled dot-product attention over all H*W tokens.

    Queries are processed in blocks of ``chunk`` rows so the score matrix
    never exceeds chunk x tokens. Inference only (returns a plain Tensor).
    """
    data = np.asarray(getattr(x, "data", x), dtype=np.float64)
    *lead, H, W, C = data.shape
    tokens = data.reshape(-1, H * W, C)
    out = np.empty_like(tokens)
    scale = 1.0 / np.sqrt(C)
    for b, t in enumerate(tokens):
        q = t @ weights["q"].data
        k = t @ weights["k"].data
        v = t @ weights["v"].data
        for lo in range(0, H * W, chunk):
            s = (q[lo:lo + chunk] @ k.T) * scale
            s -= s.max(axis=1, keepdims=True)
            np.exp(s, out=s)
            s /= s.sum(axis=1, keepdims=True)
            out[b, lo:lo + chunk] = s @ v
    out = out @ weights["o"].data
    return Tensor(out.reshape(data.shape))


def attention_rows(x, weights: dict) -> np.ndarray:
    """The full softmax matrix (small inputs only; used by tests)."""
    t = np.asarray(getattr(x, "data", x), dtype=np.float64).reshape(-1, x.shape[-1])
    s = (t @ weights["q"].data) @ (t @ weights["k"].data).T / np.sqrt(t.shape[-1])
    s = np.exp(s - s.max(axis=1, keepdims=True))
    return s / s.sum(axis=1, keepdims=True)


# --- complexity bench ----------------------------------------------------------

@dataclass
class BenchRecord:
    side: int
    pixels: int
    variant: str
    ms_median: float
    bytes: int


def _time_rounds(fns: Sequence[Callable], repeats: int) -> list[float]:
    """Median milliseconds per callable.

    Calls are made in rounds, one per callable, in a seeded shuffled order, so
    drift or bursts of contention on the machine do not line up with one size.
    Each callable gets one discarded warm-up call.
    """
    for fn in fns:
        fn()
    order_rng = np.random.default_rng(0)
    times = [[] for _ in fns]
    for _ in range(repeats):
        for i in order_rng.permutation(len(fns)):
            gc.collect()
            start = time.perf_counter()
            fns[i]()
            times[i].append(time.perf_counter() - start)
    return [float(np.median(t)) * 1e3 for t in times]


def _peak_bytes(fn: Callable) -> int:
    gc.collect()
    tracemalloc.start()
    try:
        fn()
        return int(tracemalloc.get_traced_memory()[1])
    finally:
        tracemalloc.stop()


def fit_slope(pixels: Sequence[float], ms: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(pixel count)."""
    return float(np.polyfit(np.log(pixels), np.log(ms), 1)[0])


def _check_sizes(sizes: Sequence[int]) -> list[int]:
    sizes = [int(s) for s in sizes]
    if len(sizes) < 4:
        raise ValueError("need at least 4 sizes")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    return sizes


def bench_workloads(workloads: dict, sizes: Sequence[int], repeats: int = 5,
                    measure_memory: bool = True) -> tuple[list[BenchRecord], dict]:
    """Time ``workloads[name](side)`` (a zero-arg callable factory) per side, single-threaded."""
    sizes = _check_sizes(sizes)
    if repeats < 5:
        raise ValueError("need at least 5 timed runs")
    records = []
    with threadpool_limits(1):
        for name, factory in workloads.items():
            fns = [factory(side) for side in sizes]
            for side, fn, ms in zip(sizes, fns, _time_rounds(fns, repeats)):
                peak = _peak_bytes(fn) if measure_memory else 0
                records.append(BenchRecord(side, side * side, name, ms, peak))
    records.sort(key=lambda r: (r.pixels, r.variant))
    slopes = {}
    for name in workloads:
        rows = [r for r in records if r.variant == name]
        slopes[name] = fit_slope([r.pixels for r in rows], [r.ms_median for r in rows])
    return records, slopes


def model_workloads(state: ModelState, variants: Sequence[str] = BENCH_VARIANTS, seed: int = 0) -> dict:
    """Forward-pass factories: the SSM model and full attention at the same channel width."""
    cfg = state.config
    attn = init_attention(cfg.channels, seed)
    rng = np.random.default_rng(seed)
    out = {}
    for variant in variants:
        if variant == "ssm":
            out[variant] = lambda side: (lambda img=rng.random((side, side, cfg.in_channels)):
                                         mambair_forward(Tensor(img), state))
        elif variant == "full_attention":
            out[variant] = lambda side: (lambda feat=rng.random((side, side, cfg.channels)):
                                         full_attention_forward(feat, attn))
        else:
            raise ValueError(f"unknown bench variant {variant!r}")
    return out


def calibration_workloads(seed: int = 0) -> dict:
    """Workloads with known cost: linear and quadratic in the pixel count.

    Both sum pairwise distances over fixed 64 x 1024 tiles, so every tile costs
    the same at any size. The linear one pairs every point with a fixed
    8192-point reference (long enough to time reliably); the quadratic one pairs
    every point with every point.
    """
    rng = np.random.default_rng(seed)
    reference = rng.random(8192)

    def pairwise(pts, against):
        total = 0.0
        for lo in range(0, pts.size, 64):
            block = pts[lo:lo + 64, None]
            for start in range(0, against.size, 1024):
                total += float(np.abs(block - against[None, start:start + 1024]).sum())
        return total

    def linear_factory(side):
        pts = rng.random(side * side)
        return lambda: pairwise(pts, reference)

    def quadratic_factory(side):
        pts = rng.random(side * side)
        return lambda: pairwise(pts, pts)

    return {"linear": linear_factory, "quadratic": quadratic_factory}


def complexity_bench(state: ModelState, sizes: Sequence[int] = (48, 60, 72, 84, 96),
                     variants: Sequence[str] = BENCH_VARIANTS, repeats: int = 5,
                     measure_memory: bool = True) -> tuple[list[BenchRecord], dict]:
    return bench_workloads(model_workloads(state, variants), sizes, repeats, measure_memory)


def bench_csv(records: Sequence[BenchRecord]) -> str:
    lines = [",".join(BENCH_HEADER)]
    lines += [f"{r.side},{r.pixels},{r.variant},{r.ms_median:.3f},{r.bytes}" for r in records]
    return "\n".join(lines) + "\n"
