"""Binary checkpoint format.

    "MIRC" | u32 version | u32 count | entries          (parameters)
           | u32 count | entries                         (optimizer moments + step)
           | u32 length | UTF-8 config text              (config echo)

entry := u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 payload

All integers and floats are little-endian.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"MIRC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode_entries(entries: dict) -> bytes:
    out = [struct.pack("<I", len(entries))]
    for name, value in entries.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def entries(self) -> dict:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode("utf-8")
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(dims)
            out[name] = arr.astype(np.float64)
        return out


def encode_checkpoint(params: dict, optimizer: dict | None = None, config_text: str = "") -> bytes:
    raw = config_text.encode("utf-8")
    return b"".join([MAGIC, struct.pack("<I", VERSION), _encode_entries(params),
                     _encode_entries(optimizer or {}), struct.pack("<I", len(raw)), raw])


def decode_checkpoint(buf: bytes) -> tuple[dict, dict, str]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = r.entries()
    optimizer = r.entries()
    (n,) = r.unpack("<I")
    config_text = r.take(n).decode("utf-8")
    return params, optimizer, config_text


def save_checkpoint(path: str | os.PathLike, params: dict, optimizer: dict | None = None,
                    config_text: str = "") -> None:
    data = encode_checkpoint(params, optimizer, config_text)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict, dict, str]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
