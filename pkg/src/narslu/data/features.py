"""Binary feature-matrix files.

Header: magic ``b"NARF"``, then little-endian u32 version, rows, cols;
followed by rows*cols little-endian float32 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"NARF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def encode_features(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {m.shape}")
    return _HEADER.pack(MAGIC, VERSION, m.shape[0], m.shape[1]) + np.ascontiguousarray(m, dtype="<f4").tobytes()


def decode_features(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ValueError("feature buffer shorter than its header")
    magic, version, rows, cols = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ValueError(f"bad feature magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported feature format version {version}")
    expected = _HEADER.size + 4 * rows * cols
    if len(buf) != expected:
        raise ValueError(f"feature payload is {len(buf)} bytes, expected {expected}")
    return np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(rows, cols).astype(np.float32)


def write_features(path: Union[str, Path], matrix: np.ndarray) -> None:
    Path(path).write_bytes(encode_features(matrix))


def read_features(path: Union[str, Path]) -> np.ndarray:
    return decode_features(Path(path).read_bytes())
