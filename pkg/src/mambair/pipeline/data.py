"""Patch sampling, dihedral augmentation, degradations and the synthetic corpus."""
from __future__ import annotations

import numpy as np

from ..resample import area_downsample, bilinear_upsample  # noqa: F401  (re-exported)

# --- dihedral group -------------------------------------------------------
# code = 4 * flip + k : horizontal flip (optional) followed by k clockwise quarter turns


def dihedral(x, code: int) -> np.ndarray:
    """Apply dihedral transform ``code`` (0..7) on the (H, W) axes of (..., H, W, C)."""
    if not 0 <= code < 8:
        raise ValueError(f"augmentation code must be in 0..7, got {code}")
    x = np.asarray(x)
    if code >= 4:
        x = x[..., :, ::-1, :]
    return np.ascontiguousarray(np.rot90(x, k=-(code % 4), axes=(-3, -2)))


def inverse_code(code: int) -> int:
    if code >= 4:
        return code  # reflections are involutions
    return (4 - code) % 4


def augment(patch, code: int) -> np.ndarray:
    patch = np.asarray(patch)
    if code % 2 == 1 and patch.shape[-3] != patch.shape[-2]:
        raise ValueError("90/270 degree augmentation needs a square patch")
    return dihedral(patch, code)


def compose_codes(a: int, b: int) -> int:
    """Code c with dihedral(dihedral(x, b), a) == dihedral(x, c)."""
    return _COMPOSE[a][b]


def _compose_table() -> list[list[int]]:
    probe = np.arange(9.0).reshape(3, 3, 1)
    images = [dihedral(probe, c) for c in range(8)]
    table = []
    for a in range(8):
        row = []
        for b in range(8):
            target = dihedral(dihedral(probe, b), a)
            row.append(next(c for c in range(8) if np.array_equal(images[c], target)))
        table.append(row)
    return table


_COMPOSE = _compose_table()


# --- degradations ---------------------------------------------------------

def box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal samples from uniform pairs via the Box-Muller transform."""
    n = int(np.prod(shape))
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1]
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:n].reshape(shape)


def degrade(hq, task: str, rng: np.random.Generator | None = None, sigma: float = 25 / 255) -> np.ndarray:
    """Denoise: add N(0, sigma^2) noise. SR (``sr2``/``sr3``/``sr4``): area-average downsample."""
    hq = np.asarray(hq, dtype=np.float64)
    if task == "denoise":
        if sigma == 0:
            return hq.copy()
        if rng is None:
            raise ValueError("denoise degradation needs a seeded generator")
        return hq + sigma * box_muller(rng, hq.shape)
    if task.startswith("sr"):
        return area_downsample(hq, int(task[2:]))
    raise ValueError(f"unknown task {task!r}")


# --- patches and corpus ---------------------------------------------------

def random_patch(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    H, W = image.shape[:2]
    size = min(size, H, W)
    top = int(rng.integers(0, H - size + 1))
    left = int(rng.integers(0, W - size + 1))
    return image[top:top + size, left:left + size]


def synthetic_image(rng: np.random.Generator, size: int = 32, channels: int = 3,
                    max_rects: int = 4) -> np.ndarray:
    """A smooth colour gradient with a few flat random rectangles on top."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = rng.uniform(0.2, 0.8, channels)
    gx = rng.uniform(-0.4, 0.4, channels)
    gy = rng.uniform(-0.4, 0.4, channels)
    img = base + gx * xx[..., None] + gy * yy[..., None]
    for _ in range(int(rng.integers(1, max_rects + 1))):
        h, w = rng.integers(size // 8, size // 2 + 1, 2)
        top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        img[top:top + h, left:left + w] = rng.uniform(0.0, 1.0, channels)
    return np.clip(img, 0.0, 1.0)


def synthetic_corpus(count: int, size: int = 32, seed: int = 0, channels: int = 3) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, size, channels) for _ in range(count)]
