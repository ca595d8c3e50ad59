"""Y-channel PSNR / SSIM in the usual restoration-benchmark convention."""
from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d

BT601 = np.array([65.481, 128.553, 24.966])


def rgb_to_y(image) -> np.ndarray:
    """Studio-range luma on the 0-255 scale from [0, 1] RGB; gray images are just rescaled."""
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if img.shape[-1] == 1:
        return img[..., 0] * 255.0
    if img.shape[-1] != 3:
        raise ValueError("expected 1 or 3 channels")
    return img @ BT601 + 16.0


def _check(a, b):
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr_from_mse(mse: float) -> float:
    if mse == 0:
        return math.inf
    return 20.0 * math.log10(255.0) - 10.0 * math.log10(mse)


def psnr_y(a, b) -> float:
    a, b = _check(a, b)
    if np.array_equal(a, b):
        return math.inf
    diff = rgb_to_y(a) - rgb_to_y(b)
    return psnr_from_mse(float(np.mean(diff * diff)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_plane(x: np.ndarray, y: np.ndarray, window: np.ndarray) -> float:
    c1 = (0.01 * 255) ** 2
    c2 = (0.03 * 255) ** 2

    def filt(img):
        return convolve2d(img, window, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim_y(a, b, window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over the valid region of an 11x11 Gaussian (std 1.5) window.

    Images smaller than the window use the largest odd window that fits.
    Leading batch axes are averaged.
    """
    a, b = _check(a, b)
    if np.array_equal(a, b):
        return 1.0
    ya, yb = rgb_to_y(a), rgb_to_y(b)
    size = min(window_size, ya.shape[-1], ya.shape[-2])
    size -= 1 - size % 2
    window = gaussian_window(size, sigma)
    ya = ya.reshape((-1,) + ya.shape[-2:])
    yb = yb.reshape((-1,) + yb.shape[-2:])
    return float(np.mean([_ssim_plane(p, q, window) for p, q in zip(ya, yb)]))
