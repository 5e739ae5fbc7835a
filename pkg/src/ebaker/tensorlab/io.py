"""Named-tensor container files (magic ``EBKT1``).

Layout, all integers unsigned 64-bit little-endian::

    b"EBKT1" count
    repeat count times:
        name_len name(utf-8) rank dim_0 .. dim_{rank-1} data(float64 LE, row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"EBKT1"
_U64 = struct.Struct("<Q")


class FormatError(ValueError):
    pass


def dumps_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U64.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        parts.append(_U64.pack(len(raw)))
        parts.append(raw)
        parts.append(_U64.pack(arr.ndim))
        parts.extend(_U64.pack(n) for n in arr.shape)
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def loads_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:5] != MAGIC:
        raise FormatError("not an EBKT1 container")
    pos = 5

    def u64() -> int:
        nonlocal pos
        if pos + 8 > len(buf):
            raise FormatError("truncated container")
        (val,) = _U64.unpack_from(buf, pos)
        pos += 8
        return val

    out: dict[str, np.ndarray] = {}
    for _ in range(u64()):
        n = u64()
        if pos + n > len(buf):
            raise FormatError("truncated tensor name")
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        shape = tuple(u64() for _ in range(u64()))
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated data for {name}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor")
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return loads_tensors(Path(path).read_bytes())
