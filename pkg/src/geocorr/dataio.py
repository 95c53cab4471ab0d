"""On-disk dataset container plus its JSON manifest.

Layout (little-endian), one file holding many samples:

    magic   4 bytes  b"UCDS"
    version u32
    count   u64
    then per sample:
    task    u8       index into TASKS
    seed    u64
    nfield  u32
    per field: name length u64, name UTF-8, rank u64, dims u64..., f8 payload

Field payloads are raw float64, so write -> read is bit-exact. The manifest
is a sidecar JSON listing seeds and generation parameters; it carries no
timestamps, keeping regeneration byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .synthdata import TASKS, SceneSpec, TrainSample

MAGIC = b"UCDS"
VERSION = 1


def save_dataset(path, samples: list[TrainSample]):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(samples)))
        for s in samples:
            if s.task not in TASKS:
                raise DataError(f"unknown task tag {s.task!r}")
            f.write(struct.pack("<B", TASKS.index(s.task)))
            f.write(struct.pack("<Q", s.seed))
            arrays = s.arrays()
            f.write(struct.pack("<I", len(arrays)))
            for name, value in arrays.items():
                arr = np.asarray(value, dtype="<f8", order="C")
                raw = name.encode("utf-8")
                f.write(struct.pack("<Q", len(raw)))
                f.write(raw)
                f.write(struct.pack("<Q", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
                f.write(arr.tobytes(order="C"))


def load_dataset(path) -> list[TrainSample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise DataError(f"not a dataset file (bad magic): {path}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DataError(f"unsupported dataset version {version}")
    (count,) = struct.unpack_from("<Q", blob, 8)
    off = 16
    out: list[TrainSample] = []
    try:
        for _ in range(count):
            task_id = blob[off]
            off += 1
            if task_id >= len(TASKS):
                raise DataError(f"bad task tag {task_id}")
            (seed,) = struct.unpack_from("<Q", blob, off)
            off += 8
            (nfield,) = struct.unpack_from("<I", blob, off)
            off += 4
            fields: dict[str, np.ndarray] = {}
            for _ in range(nfield):
                (nlen,) = struct.unpack_from("<Q", blob, off)
                off += 8
                name = blob[off:off + nlen].decode("utf-8")
                off += nlen
                (rank,) = struct.unpack_from("<Q", blob, off)
                off += 8
                dims = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
                off += 8 * rank
                n = int(np.prod(dims)) if rank else 1
                arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
                fields[name] = arr.reshape(dims).astype(np.float64)
                off += 8 * n
            for req in ("source", "target", "kps_src", "kps_tgt", "mask", "transform"):
                if req not in fields:
                    raise DataError(f"sample missing field {req!r}")
            out.append(TrainSample(
                task=TASKS[task_id],
                source=fields["source"],
                target=fields["target"],
                kps_src=fields["kps_src"],
                kps_tgt=fields["kps_tgt"],
                mask=fields["mask"].astype(bool),
                transform=fields["transform"],
                source_intensity=fields.get("source_intensity"),
                target_intensity=fields.get("target_intensity"),
                intrinsics=fields.get("intrinsics"),
                seed=int(seed),
            ))
    except (struct.error, ValueError, IndexError) as e:
        raise DataError(f"truncated or corrupt dataset {path}: {e}") from None
    if off != len(blob):
        raise DataError(f"trailing bytes in dataset {path}")
    return out


def write_manifest(path, spec: SceneSpec, tasks: list[str], seeds: list[int]):
    doc = {
        "version": VERSION,
        "count": len(seeds),
        "tasks": list(tasks),
        "seeds": [int(s) for s in seeds],
        "spec": {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in dataclasses.asdict(spec).items() if k != "seed"},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc
