"""Matrix files: a tiny binary layout and CSV.

Binary layout: 8-byte header (rows, cols as little-endian uint32) followed
by rows*cols little-endian float64 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<II")


def save_matrix(path, a) -> None:
    a = np.atleast_2d(np.asarray(a, dtype="<f8"))
    if a.ndim != 2:
        raise ValueError("only 2-D matrices are supported")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*a.shape))
        fh.write(np.ascontiguousarray(a).tobytes())


def load_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    rows, cols = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size :]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: expected {rows * cols * 8} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def save_csv(path, a) -> None:
    np.savetxt(path, np.atleast_2d(np.asarray(a, dtype=np.float64)), delimiter=",", fmt="%.17g")


def load_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)


def load_any(path) -> np.ndarray:
    return load_csv(path) if str(path).endswith(".csv") else load_matrix(path)
