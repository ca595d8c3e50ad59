"""Dense tensor with a reverse-mode gradient tape.

Every operation in this module works on the trailing axes of its inputs, so
images are laid out as ``(..., H, W, C)`` and any leading axes act as a batch.
Operations are recorded only while a :class:`Tape` is active; outside a tape
they are plain numpy computations and the results carry no history.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> backward(y)
    >>> x.grad
    array([2., 4.])
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

DEFAULT_DTYPE = np.float64
LAYER_NORM_EPS = 1e-6

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations.

    A tape belongs to the thread that entered it. Nodes are appended in
    execution order, so walking them backwards is a valid reverse
    topological order for the adjoint replay.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", parents: tuple, backward_fn: Callable) -> None:
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append((out, parents, backward_fn))

    def backward(self, out: "Tensor", grad: np.ndarray | None = None) -> None:
        if out._tape is not self or out._node is None:
            raise ValueError("backward() called on a tensor not produced on this tape")
        if grad is None:
            if out.data.size != 1:
                raise ValueError(f"backward() needs a scalar output, got shape {out.shape}")
            grad = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=out.data.dtype)}
        for idx in range(out._node, -1, -1):
            node_out, parents, fn = self.nodes[idx]
            g = grads.pop(id(node_out), None)
            if g is None:
                continue
            needs = tuple(p.requires_grad for p in parents)
            pgrads = fn(g, needs)
            for p, pg, need in zip(parents, pgrads, needs):
                if not need or pg is None:
                    continue
                if p._node is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg

    def clear(self) -> None:
        for out, _, _ in self.nodes:
            out._tape = None
            out._node = None
        self.nodes = []


class Tensor:
    """N-dimensional float array that can take part in reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node: int | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def backward(output: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every grad-enabled leaf."""
    if output._tape is None:
        raise ValueError("backward() on a detached tensor (was it computed inside a Tape?)")
    output._tape.backward(output, grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    out._node = None
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, tuple(parents), fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _make(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _make(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _make(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def fn(g, needs):
        return (_unbroadcast(g / b.data, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None)

    return _make(out, (a, b), fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, needs: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** exponent, (a,),
                 lambda g, needs: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g, needs: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g, needs: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g, needs: (g * 0.5 / out,))


def tabs(a) -> Tensor:
    """|a|; the subgradient at 0 is 0."""
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g, needs: (g * np.sign(a.data),))


# -- activations -----------------------------------------------------------

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _make(out, (a,), lambda g, needs: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    return _make(a.data * s, (a,), lambda g, needs: (g * s * (1.0 + a.data * (1.0 - s)),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g, needs: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # ln(1+e^x) = x + ln(1+e^-x) keeps large positive inputs exact
    out = np.where(x > 30.0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 30.0))))
    return _make(out, (a,), lambda g, needs: (g * expit(x),))


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _make(x * cdf, (a,), lambda g, needs: (g * (cdf + x * pdf),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), fn)


# -- reductions and shape ops ----------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g, needs: (g.transpose(inverse),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def fn(g, needs):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), fn)


def take(a, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis. ``indices`` must be a permutation-like integer array."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    axis = axis % a.ndim

    unique = len(np.unique(indices)) == indices.size

    def fn(g, needs):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, axis, 0)
        if unique:
            moved[indices] = gm
        else:
            n = a.shape[axis]
            for lo in range(0, indices.size, n):
                # each length-n block of a repeated permutation is collision-free
                block = indices[lo:lo + n]
                if len(np.unique(block)) == block.size:
                    moved[block] += gm[lo:lo + n]
                else:
                    np.add.at(moved, block, gm[lo:lo + n])
        return (full,)

    return _make(np.take(a.data, indices, axis=axis), (a,), fn)


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.flip(a.data, axis).copy(), (a,), lambda g, needs: (np.flip(g, axis).copy(),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def fn(g, needs):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, fn)


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    a = as_tensor(a)
    axis = axis % a.ndim
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        idx = (slice(None),) * axis + (slice(int(lo), int(hi)),)
        parts.append(getslice(a, idx))
    return parts


def getslice(a, index: tuple) -> Tensor:
    """Basic-slicing gather whose backward writes into a zero buffer (no np.add.at)."""
    a = as_tensor(a)

    def fn(g, needs):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), fn)


# -- linear algebra and convolution ---------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., K) and a 2-D ``b`` of shape (K, M)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ValueError("matmul expects a 2-D right operand")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def fn(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if needs[1] else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), fn)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def _check_kernel(k: int, padding: int | None) -> int:
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    pad = (k - 1) // 2
    if padding is not None and padding != pad:
        raise ValueError(f"padding must be {pad} for a {k}x{k} kernel to preserve size")
    return pad


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    return np.pad(x, widths)


def conv2d(x, weight, bias=None, padding: int | None = None) -> Tensor:
    """Zero-padded 'same' cross-correlation.

    x is (..., H, W, Cin), weight is (k, k, Cin, Cout), bias is (Cout,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    k, k2, cin, cout = weight.shape
    if k != k2:
        raise ValueError("conv2d expects a square kernel")
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d: input has {x.shape[-1]} channels, weight expects {cin}")
    pad = _check_kernel(k, padding)
    H, W = x.shape[-3], x.shape[-2]
    xp = _pad_hw(x.data, pad)
    if k == 1:
        cols = xp
    else:
        cols = np.concatenate([xp[..., i:i + H, j:j + W, :] for i in range(k) for j in range(k)], axis=-1)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = cols @ wmat
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def fn(g, needs):
        gx = gw = gb = None
        if needs[0]:
            gcols = g @ wmat.T
            if k == 1:
                gx = gcols
            else:
                gcols = gcols.reshape(g.shape[:-1] + (k * k, cin))
                gxp = np.zeros(xp.shape)
                for i in range(k):
                    for j in range(k):
                        gxp[..., i:i + H, j:j + W, :] += gcols[..., i * k + j, :]
                gx = gxp[..., pad:pad + H, pad:pad + W, :]
        if needs[1]:
            gw = (cols.reshape(-1, k * k * cin).T @ g.reshape(-1, cout)).reshape(weight.shape)
        if len(needs) > 2 and needs[2]:
            gb = g.reshape(-1, cout).sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, fn)


def depthwise_conv2d(x, weight, bias=None, padding: int | None = None) -> Tensor:
    """Per-channel zero-padded 'same' convolution; weight is (k, k, C)."""
    x, weight = as_tensor(x), as_tensor(weight)
    k, k2, c = weight.shape
    if k != k2:
        raise ValueError("depthwise_conv2d expects a square kernel")
    if x.shape[-1] != c:
        raise ValueError(f"depthwise_conv2d: input has {x.shape[-1]} channels, weight has {c}")
    pad = _check_kernel(k, padding)
    H, W = x.shape[-3], x.shape[-2]
    xp = _pad_hw(x.data, pad)
    w = weight.data
    out = np.zeros(x.shape)
    for i in range(k):
        for j in range(k):
            out += xp[..., i:i + H, j:j + W, :] * w[i, j]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data

    def fn(g, needs):
        gx = gw = gb = None
        if needs[0]:
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[..., i:i + H, j:j + W, :] += g * w[i, j]
            gx = gxp[..., pad:pad + H, pad:pad + W, :]
        if needs[1]:
            gw = np.empty_like(w)
            flat_g = g.reshape(-1, c)
            for i in range(k):
                for j in range(k):
                    gw[i, j] = np.einsum("nc,nc->c", xp[..., i:i + H, j:j + W, :].reshape(-1, c), flat_g)
        if len(needs) > 2 and needs[2]:
            gb = g.reshape(-1, c).sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, fn)


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last (channel) axis."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError("layer_norm affine parameters must match the channel count")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def fn(g, needs):
        gx = gg = gbeta = None
        if needs[0]:
            gxhat = g * gamma.data
            gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                         - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if needs[2]:
            gbeta = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gg, gbeta

    return _make(out, (x, gamma, beta), fn)


def pixel_shuffle(x, r: int) -> Tensor:
    """Depth-to-space: (..., H, W, r*r*C) -> (..., r*H, r*W, C).

    Channel index ``(i*r + j)*C + c`` lands at sub-pixel (i, j) of each r x r cell.
    """
    x = as_tensor(x)
    *lead, H, W, rc = x.shape
    if rc % (r * r):
        raise ValueError(f"pixel_shuffle: {rc} channels not divisible by r^2={r * r}")
    c = rc // (r * r)
    n = len(lead)
    y = x.reshape(tuple(lead) + (H, W, r, r, c))
    y = transpose(y, tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return y.reshape(tuple(lead) + (H * r, W * r, c))


def space_to_depth(x, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    x = as_tensor(x)
    *lead, H, W, c = x.shape
    if H % r or W % r:
        raise ValueError("space_to_depth: spatial size not divisible by r")
    n = len(lead)
    y = x.reshape(tuple(lead) + (H // r, r, W // r, r, c))
    y = transpose(y, tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return y.reshape(tuple(lead) + (H // r, W // r, r * r * c))
