"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"NARC"                      magic
    u32 version                  currently 1
    u32 meta_len, bytes meta     UTF-8 JSON object (config, counters, rng state)
    u32 n_records
    n_records x:
        u16 name_len, bytes name (UTF-8)
        u32 ndim, u32 * ndim dims
        float32 little-endian payload, row-major, prod(dims) values
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Union

import numpy as np

MAGIC = b"NARC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: Union[str, Path], arrays: dict[str, np.ndarray],
                    meta: dict[str, Any] | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Union[str, Path]) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(buf[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
        off += 4 * n
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return arrays, meta
