"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"UCKP"
    version u32
    count   u64      number of named arrays
    then per array:
    nlen    u64      UTF-8 name length in bytes
    name    nlen bytes
    rank    u64
    dims    rank * u64
    data    prod(dims) * f8, row-major

Round-trips are bit-exact: float64 payloads are written raw.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"UCKP"
VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray]):
    names = list(arrays.keys())
    if len(set(names)) != len(names):
        raise DataError("duplicate array names in checkpoint")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(names)))
        for name in names:
            # note: ascontiguousarray would promote rank-0 arrays to rank 1
            arr = np.asarray(arrays[name], dtype="<f8", order="C")
            raw = name.encode("utf-8")
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            f.write(arr.tobytes(order="C"))


def load_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise DataError(f"not a checkpoint file (bad magic): {path}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<Q", blob, 8)
    off = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<Q", blob, off)
            off += 8
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<Q", blob, off)
            off += 8
            dims = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
            off += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
            off += 8 * n
            out[name] = arr.astype(np.float64)  # own, writable copy
    except (struct.error, ValueError) as e:
        raise DataError(f"truncated or corrupt checkpoint {path}: {e}") from None
    if off != len(blob):
        raise DataError(f"trailing bytes in checkpoint {path}")
    return out
