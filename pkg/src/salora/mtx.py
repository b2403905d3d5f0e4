"""MTX1 binary matrix container and the key=value manifest files.

Layout: magic ``b"MTX1"``, rows and cols as little-endian uint64, then
rows*cols little-endian float64 values in row-major order.
"""
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"MTX1"
_HEADER = struct.Struct("<4sQQ")


def to_bytes(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise FormatError(f"MTX1 stores 2-D matrices, got shape {m.shape}")
    rows, cols = m.shape
    return _HEADER.pack(MAGIC, rows, cols) + np.ascontiguousarray(m, dtype="<f8").tobytes()


def from_bytes(buf):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated MTX1 header")
    magic, rows, cols = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    expected = _HEADER.size + 8 * rows * cols
    if len(buf) != expected:
        raise FormatError(f"MTX1 payload is {len(buf)} bytes, expected {expected} for {rows}x{cols}")
    data = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size, count=rows * cols)
    return data.astype(np.float64).reshape(rows, cols)


def save(path, m):
    Path(path).write_bytes(to_bytes(m))


def load(path):
    return from_bytes(Path(path).read_bytes())


def write_manifest(path, entries):
    """Write ``key=value`` lines in insertion order."""
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    entries = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries
