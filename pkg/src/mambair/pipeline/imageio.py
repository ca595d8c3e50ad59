"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit, maxval 255."""
from __future__ import annotations

import os

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(buf: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(buf[start:pos])
    return out, pos


def decode_image(buf: bytes) -> np.ndarray:
    """Decode P5/P6 bytes to an (H, W, C) float array in [0, 1]."""
    (magic,), pos = _tokens(buf, 1, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; expected P5 or P6")
    try:
        (w, h, maxval), pos = _tokens(buf, 3, pos)
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"malformed header: {exc}") from None
    if maxval != 255:
        raise ImageFormatError(f"maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise ImageFormatError("image dimensions must be positive")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header")
    pos += 1
    channels = 1 if magic == b"P5" else 3
    size = width * height * channels
    payload = buf[pos:pos + size]
    if len(payload) < size:
        raise ImageFormatError(f"truncated payload: {len(payload)} of {size} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return pixels.astype(np.float64) / 255.0


def encode_image(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[-1] not in (1, 3):
        raise ImageFormatError(f"expected (H, W, 1) or (H, W, 3) image, got {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = "P5" if img.shape[-1] == 1 else "P6"
    header = f"{magic}\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    return header + q.tobytes()


def image_read(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def image_write(path: str | os.PathLike, image) -> None:
    data = encode_image(getattr(image, "data", image))
    with open(path, "wb") as fh:
        fh.write(data)


def list_images(directory: str | os.PathLike) -> list[str]:
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith((".pgm", ".ppm", ".pnm")))
    return [os.path.join(directory, n) for n in names]
