"""Manifest + blob tensor files.

A tensor set is stored as a JSON manifest (name, shape, byte offset per
entry, plus arbitrary extra metadata) next to one flat binary blob of
little-endian float64 values in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "homeofit-tensors-v1"


class SerializationError(RuntimeError):
    pass


def save_tensors(manifest_path, blob_path, tensors: dict[str, np.ndarray], extra: dict | None = None):
    manifest_path, blob_path = Path(manifest_path), Path(blob_path)
    entries = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        chunks.append(arr.tobytes())
    manifest = {
        "format": FORMAT,
        "blob": blob_path.name,
        "total_bytes": offset,
        "entries": entries,
        "extra": extra or {},
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    blob_path.write_bytes(b"".join(chunks))


def load_tensors(manifest_path, blob_path=None) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise SerializationError(f"cannot read manifest {manifest_path}: {e}") from e
    if manifest.get("format") != FORMAT:
        raise SerializationError(f"unknown manifest format in {manifest_path}")
    if blob_path is None:
        blob_path = manifest_path.parent / manifest["blob"]
    raw = Path(blob_path).read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise SerializationError(
            f"blob {blob_path} has {len(raw)} bytes, manifest says {manifest['total_bytes']}"
        )
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            raw, dtype="<f8", count=count, offset=entry["offset"]
        ).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64).copy()
    return tensors, manifest.get("extra", {})
