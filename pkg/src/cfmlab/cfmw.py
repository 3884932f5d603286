"""CFMW tensor container.

Layout (all integers little-endian)::

    b"CFMW"  u32 version=1  u32 count
    count x [ u16 name_len | name (utf-8) | u8 rank | rank x u32 dims | f32 data ]

Tensors are written in the order given. Data is always float32.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Iterable, Tuple, Union

import numpy as np

MAGIC = b"CFMW"
VERSION = 1


class WeightFileError(ValueError):
    pass


class BadMagicError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


def encode(tensors: Iterable[Tuple[str, np.ndarray]]) -> bytes:
    items = list(tensors)
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        a = np.array(arr, dtype="<f4", order="C")  # ascontiguousarray would promote rank 0 to 1
        if a.ndim > 255:
            raise ValueError(f"tensor {name!r} has rank {a.ndim} > 255")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"truncated file while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def decode(buf: bytes) -> Dict[str, np.ndarray]:
    """Parse a CFMW byte string into an insertion-ordered name -> float32 array map."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {bytes(buf[:4])!r}")
    r = _Reader(buf)
    r.pos = 4
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {VERSION}")
    (count,) = struct.unpack("<I", r.take(4, "tensor count"))
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2, "name length"))
        name = r.take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1, f"rank of {name!r}"))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name!r}"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * n, f"data of {name!r}"), dtype="<f4")
        out[name] = data.reshape(dims).astype(np.float32)
    return out


def save(path: Union[str, Path], tensors: Iterable[Tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
