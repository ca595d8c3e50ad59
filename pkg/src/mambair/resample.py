"""Area downsampling and half-pixel bilinear upsampling, in numpy and as a Tensor op."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, add, as_tensor, mul, take


def area_downsample(image, scale: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    *lead, H, W, C = img.shape
    H2, W2 = H // scale, W // scale
    img = img[..., :H2 * scale, :W2 * scale, :]
    return img.reshape(tuple(lead) + (H2, scale, W2, scale, C)).mean(axis=(-4, -2))


def _linear_weights(n_in: int, scale: int):
    pos = (np.arange(n_in * scale) + 0.5) / scale - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def bilinear_upsample(image, scale: int) -> np.ndarray:
    """Half-pixel-centred bilinear upsampling with edge clamping."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[-3], img.shape[-2]
    lo, hi, t = _linear_weights(H, scale)
    img = img[..., lo, :, :] * (1 - t)[:, None, None] + img[..., hi, :, :] * t[:, None, None]
    lo, hi, t = _linear_weights(W, scale)
    return img[..., :, lo, :] * (1 - t)[:, None] + img[..., :, hi, :] * t[:, None]


def bilinear_upsample_tensor(image, scale: int) -> Tensor:
    """Differentiable twin of :func:`bilinear_upsample`."""
    x = as_tensor(image)
    H, W = x.shape[-3], x.shape[-2]
    lo, hi, t = _linear_weights(H, scale)
    x = add(mul(take(x, lo, -3), (1 - t)[:, None, None]), mul(take(x, hi, -3), t[:, None, None]))
    lo, hi, t = _linear_weights(W, scale)
    return add(mul(take(x, lo, -2), (1 - t)[:, None]), mul(take(x, hi, -2), t[:, None]))
