"""Parameter checkpoints.

Layout: one line of ASCII ``POWERBERT-CKPT <manifest length>``, the JSON
manifest, then the raw little-endian float32 arrays in manifest order.  Each
manifest entry records name, shape and byte offset relative to the start of
the data block.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = "POWERBERT-CKPT"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    entries = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * _LE_F32.itemsize
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {len(manifest)}\n".encode())
        fh.write(manifest)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())


def read_manifest(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        head = fh.readline().decode("ascii", "replace").split()
        if len(head) != 2 or head[0] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint")
        manifest = json.loads(fh.read(int(head[1])))
        return manifest, fh.tell()


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    manifest, start = read_manifest(path)
    blob = Path(path).read_bytes()[start:]
    arrays = {}
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"]
        hi = lo + n * _LE_F32.itemsize
        if hi > len(blob):
            raise CheckpointError(f"{path}: truncated data for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob[lo:hi], dtype=_LE_F32).astype(np.float64).reshape(entry["shape"])
    return arrays, manifest["meta"]
