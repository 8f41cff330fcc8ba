"""Versioned little-endian binary container for float64 matrices.

Single-matrix blob layout:

    bytes 0-3    magic b"AVLM"
    bytes 4-7    u32 version (currently 1)
    bytes 8-11   u32 rows
    bytes 12-15  u32 cols
    bytes 16-    rows * cols IEEE-754 float64, row-major

The named-matrix container (checkpoints) shares the header and follows it
with a u32 entry count, then per entry: u32 name length, UTF-8 name,
u32 rows, u32 cols, payload.  All integers little-endian.  Reads are
byte-exact inverses of writes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"AVLM"
VERSION = 1

_HEADER = struct.Struct("<4sI")
_U32 = struct.Struct("<I")
_DIMS = struct.Struct("<II")


def _matrix_bytes(m: np.ndarray) -> bytes:
    return np.ascontiguousarray(m, dtype="<f8").tobytes()


def _take(buf: bytes, offset: int, n: int, what: str) -> tuple[bytes, int]:
    if offset + n > len(buf):
        raise FormatError(f"truncated blob: needed {n} bytes for {what} at offset {offset}, file has {len(buf)}")
    return buf[offset:offset + n], offset + n


def _read_header(buf: bytes, path: Path) -> int:
    raw, offset = _take(buf, 0, _HEADER.size, "header")
    magic, version = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0 in {path}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported blob version {version} at offset 4 in {path}")
    return offset


def write_matrix(path, m: np.ndarray) -> None:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise FormatError(f"blob payload must be 2-D, got shape {m.shape}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION))
        f.write(_DIMS.pack(m.shape[0], m.shape[1]))
        f.write(_matrix_bytes(m))


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    offset = _read_header(buf, path)
    raw, offset = _take(buf, offset, _DIMS.size, "dimensions")
    rows, cols = _DIMS.unpack(raw)
    payload, offset = _take(buf, offset, rows * cols * 8, f"{rows}x{cols} payload")
    m = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
    if not np.all(np.isfinite(m)):
        raise FormatError(f"non-finite entries in blob {path}")
    return m


def write_named_matrices(path, items: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION))
        f.write(_U32.pack(len(items)))
        for name, m in items:
            m = np.asarray(m, dtype=np.float64)
            if m.ndim != 2:
                raise FormatError(f"entry {name!r} must be 2-D, got shape {m.shape}")
            encoded = name.encode("utf-8")
            f.write(_U32.pack(len(encoded)))
            f.write(encoded)
            f.write(_DIMS.pack(m.shape[0], m.shape[1]))
            f.write(_matrix_bytes(m))


def read_named_matrices(path) -> list[tuple[str, np.ndarray]]:
    path = Path(path)
    buf = path.read_bytes()
    offset = _read_header(buf, path)
    raw, offset = _take(buf, offset, _U32.size, "entry count")
    (count,) = _U32.unpack(raw)
    items: list[tuple[str, np.ndarray]] = []
    for i in range(count):
        raw, offset = _take(buf, offset, _U32.size, f"name length of entry {i}")
        (name_len,) = _U32.unpack(raw)
        raw, offset = _take(buf, offset, name_len, f"name of entry {i}")
        name = raw.decode("utf-8")
        raw, offset = _take(buf, offset, _DIMS.size, f"dimensions of {name!r}")
        rows, cols = _DIMS.unpack(raw)
        payload, offset = _take(buf, offset, rows * cols * 8, f"payload of {name!r}")
        m = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
        if not np.all(np.isfinite(m)):
            raise FormatError(f"non-finite entries in {name!r} of {path}")
        items.append((name, m))
    if offset != len(buf):
        raise FormatError(f"trailing garbage at offset {offset} in {path}")
    return items
