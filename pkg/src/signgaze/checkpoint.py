"""Versioned binary checkpoint format for named float64 tensors.

Layout (all integers little-endian uint32 unless noted):

    magic   8 bytes  b"SIGNCKPT"
    version uint32   currently 1
    count   uint32   number of tensors
    then per tensor, in order:
        name_len uint32
        name     utf-8 bytes
        ndim     uint32
        dims     uint32 * ndim
        data     float64 little-endian, row-major

Round-trips are bit-exact; tensor order is preserved.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptHeader, TruncatedData, UnsupportedFormat

MAGIC = b"SIGNCKPT"
VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise TruncatedData(f"{path}: too short for a checkpoint header")
    if data[:8] != MAGIC:
        raise UnsupportedFormat(f"{path}: bad checkpoint magic {data[:8]!r}")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise UnsupportedFormat(f"{path}: checkpoint version {version} unsupported")
    pos = 16
    tensors: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedData(f"{path}: checkpoint ends inside a record")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptHeader(f"{path}: tensor name is not valid utf-8") from None
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        raw = take(8 * size)
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return tensors
