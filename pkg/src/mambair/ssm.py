"""Linear state-space kernels: ZOH discretization, recurrent / convolutional
forms of the LTI system, and the selective (input-dependent) scan.

State matrices are diagonal throughout and stored as vectors, with
``A = -exp(a_log)`` so every mode is stable.

Shapes used by the selective scan:

    x, delta : (..., L, Cd)
    A        : (..., Cd, N)   broadcast against the leading axes of x
    B, C     : (..., L, N)
    D        : (..., Cd)
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _make, _unbroadcast, as_tensor, exp, linear, neg, softplus

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

ZOH_SERIES_THRESHOLD = 1e-8


@dataclass
class LtiParams:
    """Continuous diagonal LTI system h' = A h + B x, y = C h + D x."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float = 0.0

    def __post_init__(self):
        self.A = np.atleast_1d(np.asarray(self.A, dtype=np.float64))
        self.B = np.atleast_1d(np.asarray(self.B, dtype=np.float64))
        self.C = np.atleast_1d(np.asarray(self.C, dtype=np.float64))
        if self.A.ndim != 1 or len(self.A) < 1:
            raise ValueError("A must be a non-empty diagonal (vector)")
        if self.B.shape != self.A.shape or self.C.shape != self.A.shape:
            raise ValueError("A, B and C must all have length N")
        if np.any(self.A >= 0):
            raise ValueError("diagonal A must be strictly negative")

    @classmethod
    def from_log(cls, a_log, B, C, D=0.0) -> "LtiParams":
        return cls(-np.exp(np.asarray(a_log, dtype=np.float64)), B, C, D)

    @property
    def N(self) -> int:
        return len(self.A)


@dataclass
class DiscreteParams:
    """Discretized diagonal system. Arrays are (N,) or per-token (L, N)."""

    A_bar: np.ndarray
    B_bar: np.ndarray
    delta: float | np.ndarray


def zoh_b_factor(dA: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z with the series limit near z = 0."""
    dA = np.asarray(dA, dtype=np.float64)
    small = np.abs(dA) < ZOH_SERIES_THRESHOLD
    safe = np.where(small, 1.0, dA)
    return np.where(small, 1.0 + 0.5 * dA, np.expm1(safe) / safe)


def discretize_zoh(params: LtiParams, delta) -> DiscreteParams:
    """Zero-order hold: A_bar = exp(delta A), B_bar = (delta A)^-1 (exp(delta A) - 1) delta B.

    ``delta`` may be a positive scalar or a per-token vector of shape (L,),
    in which case the result has per-token rows.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("discretization step delta must be positive")
    d = delta[..., None] if delta.ndim else delta
    dA = d * params.A
    return DiscreteParams(np.exp(dA), zoh_b_factor(dA) * d * params.B, delta)


def ssm_kernel(disc: DiscreteParams, C, L: int) -> np.ndarray:
    """K_bar[i] = C A_bar^i B_bar for i = 0..L-1."""
    powers = np.asarray(disc.A_bar)[None, :] ** np.arange(L)[:, None]
    return powers @ (np.asarray(C, dtype=np.float64) * disc.B_bar)


def ssm_recurrent(disc: DiscreteParams, C, D, x, h0=None) -> np.ndarray:
    """h_k = A_bar h_{k-1} + B_bar x_k ; y_k = C h_k + D x_k."""
    x = np.asarray(x, dtype=np.float64)
    L = len(x)
    A_bar, B_bar = np.asarray(disc.A_bar), np.asarray(disc.B_bar)
    C = np.asarray(C, dtype=np.float64)
    per_token = A_bar.ndim == 2
    for arr in (A_bar, B_bar) + ((C,) if C.ndim == 2 else ()):
        if arr.ndim == 2 and len(arr) != L:
            raise ValueError(f"per-token parameter length {len(arr)} != sequence length {L}")
    h = np.zeros(A_bar.shape[-1]) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.empty(L)
    for k in range(L):
        a = A_bar[k] if per_token else A_bar
        b = B_bar[k] if B_bar.ndim == 2 else B_bar
        c = C[k] if C.ndim == 2 else C
        h = a * h + b * x[k]
        y[k] = c @ h + D * x[k]
    return y


def ssm_convolutional(params: LtiParams, delta, x) -> np.ndarray:
    """Causal convolution with K_bar, plus the D x feedthrough."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim:
        raise ValueError("the convolutional form needs a time-invariant (scalar) delta")
    x = np.asarray(x, dtype=np.float64)
    L = len(x)
    kernel = ssm_kernel(discretize_zoh(params, delta), params.C, L)
    return np.convolve(x, kernel)[:L] + params.D * x


# ---------------------------------------------------------------------------
# selective parameterization


@dataclass
class SelectiveProjection:
    """Per-token maps x_t -> (delta_t, B_t, C_t) plus A_log and D.

    w_delta: (Cd, Cd), b_delta: (Cd,), w_B / w_C: (Cd, N), a_log: (Cd, N), D: (Cd,)
    """

    w_delta: np.ndarray
    b_delta: np.ndarray
    w_B: np.ndarray
    w_C: np.ndarray
    a_log: np.ndarray
    D: np.ndarray

    @classmethod
    def init(cls, channels: int, state: int, rng: np.random.Generator,
             dt_min: float = 1e-3, dt_max: float = 1e-1) -> "SelectiveProjection":
        bound = 1.0 / np.sqrt(channels)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), channels))
        return cls(
            w_delta=rng.uniform(-bound, bound, (channels, channels)),
            b_delta=inverse_softplus(dt),
            w_B=rng.uniform(-bound, bound, (channels, state)),
            w_C=rng.uniform(-bound, bound, (channels, state)),
            a_log=default_a_log(channels, state),
            D=np.ones(channels),
        )


@dataclass
class SelectiveParams:
    """Resolved per-token selective parameters for one sequence (or a batch)."""

    a_log: np.ndarray  # (Cd, N)
    delta: np.ndarray  # (..., L, Cd)
    B: np.ndarray  # (..., L, N)
    C: np.ndarray  # (..., L, N)
    D: np.ndarray  # (Cd,)

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.a_log)

    def reversed(self) -> "SelectiveParams":
        return SelectiveParams(self.a_log, np.flip(self.delta, -2), np.flip(self.B, -2),
                               np.flip(self.C, -2), self.D)


def default_a_log(channels: int, state: int) -> np.ndarray:
    return np.log(np.tile(np.arange(1, state + 1, dtype=np.float64), (channels, 1)))


def inverse_softplus(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def selective_project(x, proj: SelectiveProjection):
    """Return Tensors (delta, B, C) for tokens x of shape (..., L, Cd)."""
    x = as_tensor(x)
    delta = softplus(linear(x, as_tensor(proj.w_delta), as_tensor(proj.b_delta)))
    return delta, linear(x, as_tensor(proj.w_B)), linear(x, as_tensor(proj.w_C))


def resolve(x, proj: SelectiveProjection) -> SelectiveParams:
    delta, B, C = selective_project(x, proj)
    return SelectiveParams(np.asarray(proj.a_log, dtype=np.float64), delta.data, B.data, C.data,
                           np.asarray(proj.D, dtype=np.float64))


def _check_lengths(sel: SelectiveParams, x: np.ndarray) -> None:
    L = x.shape[-2]
    for name in ("delta", "B", "C"):
        arr = getattr(sel, name)
        if arr.shape[-2] != L:
            raise ValueError(f"per-token {name} has length {arr.shape[-2]}, sequence has {L}")


def _discretize_selective(sel: SelectiveParams, x: np.ndarray, exact_b: bool):
    dA_log = sel.delta[..., None] * sel.A  # (..., L, Cd, N)
    dA = np.exp(dA_log)
    if exact_b:
        dB = zoh_b_factor(dA_log) * sel.delta[..., None] * sel.B[..., None, :]
    else:
        dB = sel.delta[..., None] * sel.B[..., None, :]
    return dA, dB * x[..., None]


def _readout(h: np.ndarray, C: np.ndarray, D: np.ndarray, x: np.ndarray) -> np.ndarray:
    # fixed accumulation order over the state axis
    y = h[..., 0] * C[..., None, 0]
    for n in range(1, h.shape[-1]):
        y = y + h[..., n] * C[..., None, n]
    return y + D * x


def selective_scan_sequential(sel: SelectiveParams, x, exact_b: bool = False) -> np.ndarray:
    """Reference loop: h_k = exp(delta_k A) h_{k-1} + delta_k B_k x_k."""
    x = np.asarray(x, dtype=np.float64)
    _check_lengths(sel, x)
    dA, dBx = _discretize_selective(sel, x, exact_b)
    h = np.zeros(dA.shape[:-3] + dA.shape[-2:])
    hs = np.empty_like(dA)
    for k in range(x.shape[-2]):
        h = dA[..., k, :, :] * h + dBx[..., k, :, :]
        hs[..., k, :, :] = h
    return _readout(hs, sel.C, sel.D, x)


def associative_scan(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    """Inclusive scan of h_k = a_k h_{k-1} + b_k (h_{-1} = 0) along ``axis``.

    Brent-Kung up-sweep / down-sweep over pairs (a, b) with
    (a2, b2) o (a1, b1) = (a1 a2, a2 b1 + b2). The tree is a fixed function of
    the length; sequences that are not a power of two behave as if padded
    with identity elements (1, 0), which never change a value.
    """
    a = np.moveaxis(np.array(a, dtype=np.float64), axis, 0)
    b = np.moveaxis(np.array(b, dtype=np.float64), axis, 0)
    n = a.shape[0]
    d = 1
    while d < n:
        hi, lo = slice(2 * d - 1, n, 2 * d), slice(d - 1, n - d, 2 * d)
        b[hi] += a[hi] * b[lo]
        a[hi] *= a[lo]
        d *= 2
    d //= 4
    while d >= 1:
        hi, lo = slice(3 * d - 1, n, 2 * d), slice(2 * d - 1, n - d, 2 * d)
        b[hi] += a[hi] * b[lo]
        a[hi] *= a[lo]
        d //= 2
    return np.moveaxis(b, 0, axis)


def _chunks(n: int, workers: int) -> list[slice]:
    bounds = np.linspace(0, n, max(1, min(workers, n)) + 1).astype(int)
    return [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]


def selective_scan_parallel(sel: SelectiveParams, x, workers: int = 1,
                            exact_b: bool = False) -> np.ndarray:
    """Selective scan through :func:`associative_scan`.

    ``workers > 1`` splits the channel axis across threads; each channel's
    scan tree is unchanged so the output does not depend on the worker count.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_lengths(sel, x)
    dA, dBx = _discretize_selective(sel, x, exact_b)
    if workers <= 1:
        h = associative_scan(dA, dBx, axis=-3)
    else:
        h = np.empty_like(dA)
        parts = _chunks(dA.shape[-2], workers)

        def run(part):
            h[..., part, :] = associative_scan(dA[..., part, :], dBx[..., part, :], axis=-3)

        with ThreadPoolExecutor(max_workers=len(parts)) as pool:
            list(pool.map(run, parts))
    return _readout(h, sel.C, sel.D, x)


# ---------------------------------------------------------------------------
# differentiable selective scan used inside the network

if numba is not None:

    @numba.njit(cache=True)
    def _scan_fwd_kernel(x, delta, dA, B, C, D):
        T, L, Cd = x.shape
        N = dA.shape[3]
        y = np.empty((T, L, Cd))
        hs = np.empty((T, L, Cd, N))
        h = np.zeros((Cd, N))
        for t in range(T):
            h[:, :] = 0.0
            for l in range(L):
                for c in range(Cd):
                    dt = delta[t, l, c]
                    xv = x[t, l, c]
                    dx = dt * xv
                    acc = 0.0
                    for n in range(N):
                        hv = dA[t, l, c, n] * h[c, n] + dx * B[t, l, n]
                        h[c, n] = hv
                        hs[t, l, c, n] = hv
                        acc += hv * C[t, l, n]
                    y[t, l, c] = acc + D[t, c] * xv
        return y, hs

    @numba.njit(cache=True)
    def _scan_bwd_kernel(gy, x, delta, A, dA, B, C, D, hs):
        T, L, Cd = x.shape
        N = A.shape[2]
        gx = np.zeros((T, L, Cd))
        gdelta = np.zeros((T, L, Cd))
        gA = np.zeros((T, Cd, N))
        gB = np.zeros((T, L, N))
        gC = np.zeros((T, L, N))
        gD = np.zeros((T, Cd))
        carry = np.zeros((Cd, N))
        for t in range(T):
            carry[:, :] = 0.0
            for l in range(L - 1, -1, -1):
                for c in range(Cd):
                    g = gy[t, l, c]
                    dt = delta[t, l, c]
                    xv = x[t, l, c]
                    gxv = g * D[t, c]
                    gdt = 0.0
                    gD[t, c] += g * xv
                    for n in range(N):
                        a = A[t, c, n]
                        da = dA[t, l, c, n]
                        lam = g * C[t, l, n] + carry[c, n]
                        hprev = hs[t, l - 1, c, n] if l > 0 else 0.0
                        g_dA = lam * hprev * da
                        gA[t, c, n] += g_dA * dt
                        gdt += g_dA * a + lam * B[t, l, n] * xv
                        gxv += lam * dt * B[t, l, n]
                        gB[t, l, n] += lam * dt * xv
                        gC[t, l, n] += g * hs[t, l, c, n]
                        carry[c, n] = da * lam
                    gx[t, l, c] = gxv
                    gdelta[t, l, c] = gdt
        return gx, gdelta, gA, gB, gC, gD


def _scan_fwd_numpy(x, delta, dA, B, C, D):
    dBx = (delta * x)[..., None] * B[..., None, :]
    hs = associative_scan(dA, dBx, axis=1)
    return _readout(hs, C, D[:, None], x), hs


def _scan_bwd_numpy(gy, x, delta, A, dA, B, C, D, hs):
    gh = gy[..., None] * C[..., None, :]
    a_next = np.concatenate([dA[:, 1:], np.ones_like(dA[:, :1])], axis=1)
    lam = np.flip(associative_scan(np.flip(a_next, 1), np.flip(gh, 1), axis=1), 1)
    hprev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
    g_dA = lam * hprev * dA
    lam_b = (lam * B[..., None, :]).sum(-1)
    gx = gy * D[:, None] + delta * lam_b
    gdelta = (g_dA * A[:, None]).sum(-1) + lam_b * x
    gA = (g_dA * delta[..., None]).sum(1)
    gB = np.einsum("tlcn,tlc->tln", lam, delta * x)
    gC = np.einsum("tlcn,tlc->tln", hs, gy)
    gD = (gy * x).sum(1)
    return gx, gdelta, gA, gB, gC, gD


SCAN_IMPLS = ("fused", "parallel")


def selective_scan(x, delta, A, B, C, D, impl: str = "fused") -> Tensor:
    """Differentiable selective scan over axis -2 of ``x``.

    ``impl="fused"`` runs a compiled sequential kernel (discretization fused
    into the recurrence); ``impl="parallel"`` uses :func:`associative_scan`
    for both the forward pass and the reverse-time adjoint.
    """
    x, delta, A, B, C, D = (as_tensor(t) for t in (x, delta, A, B, C, D))
    if impl not in SCAN_IMPLS:
        raise ValueError(f"unknown scan impl {impl!r}")
    *lead, L, Cd = x.shape
    N = A.shape[-1]
    lead = tuple(lead)
    if delta.shape != x.shape:
        raise ValueError("delta must have the same shape as x")
    if B.shape[-2:] != (L, N) or C.shape[-2:] != (L, N):
        raise ValueError(f"B and C must end in (L, N) = ({L}, {N})")
    if A.shape[-2] != Cd or D.shape[-1] != Cd:
        raise ValueError("A and D must match the channel count")
    T = int(np.prod(lead)) if lead else 1

    def flat(arr, tail):
        return np.ascontiguousarray(np.broadcast_to(arr, lead + tail).reshape((T,) + tail))

    xf, df = flat(x.data, (L, Cd)), flat(delta.data, (L, Cd))
    Af, Bf, Cf, Df = flat(A.data, (Cd, N)), flat(B.data, (L, N)), flat(C.data, (L, N)), flat(D.data, (Cd,))
    dA = np.exp(df[..., None] * Af[:, None])
    fused = impl == "fused" and numba is not None
    if fused:
        y, hs = _scan_fwd_kernel(xf, df, dA, Bf, Cf, Df)
    else:
        y, hs = _scan_fwd_numpy(xf, df, dA, Bf, Cf, Df)

    def fn(g, needs):
        gf = np.ascontiguousarray(g.reshape(T, L, Cd))
        kernel = _scan_bwd_kernel if fused else _scan_bwd_numpy
        grads = kernel(gf, xf, df, Af, dA, Bf, Cf, Df, hs)
        shapes = ((L, Cd), (L, Cd), (Cd, N), (L, N), (L, N), (Cd,))
        out = []
        for gr, tail, parent, need in zip(grads, shapes, (x, delta, A, B, C, D), needs):
            out.append(_unbroadcast(gr.reshape(lead + tail), parent.shape) if need else None)
        return tuple(out)

    return _make(y.reshape(lead + (L, Cd)), (x, delta, A, B, C, D), fn)


def selective_scan_tensor(x, proj: SelectiveProjection | dict, impl: str = "fused") -> Tensor:
    """Project tokens to (delta, B, C) and run the differentiable scan.

    ``proj`` may hold Tensors (for gradient tracking) or arrays.
    """
    p = proj if isinstance(proj, dict) else vars(proj)
    x = as_tensor(x)
    delta = softplus(linear(x, as_tensor(p["w_delta"]), as_tensor(p["b_delta"])))
    B = linear(x, as_tensor(p["w_B"]))
    C = linear(x, as_tensor(p["w_C"]))
    A = neg(exp(as_tensor(p["a_log"])))
    return selective_scan(x, delta, A, B, C, as_tensor(p["D"]), impl=impl)
