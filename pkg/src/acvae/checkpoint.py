"""Checkpoint bundles: a JSON manifest plus a raw parameter blob.

The blob is the concatenation of all tensors, row-major, little-endian
32-bit IEEE-754, in manifest order; the manifest records format version,
model kind, configuration, a name/shape/offset table, the rng seed, and the
step count. Save -> load -> save reproduces both files byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ndgrad import ParamSet

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"
BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint bundle."""


@dataclass(frozen=True)
class Bundle:
    kind: str
    config: dict
    params: ParamSet
    step: int
    rng_seed: int
    extra: dict = field(default_factory=dict)
    digest: str = ""


def _blob_bytes(params: ParamSet) -> bytes:
    return b"".join(
        np.ascontiguousarray(arr, dtype=BLOB_DTYPE).tobytes() for _, arr in params.items()
    )


def save_bundle(
    dir_path,
    kind: str,
    config: dict,
    params: ParamSet,
    *,
    step: int = 0,
    rng_seed: int = 0,
    extra: dict | None = None,
) -> str:
    """Write manifest + blob into `dir_path`; returns the blob's sha256."""
    path = Path(dir_path)
    path.mkdir(parents=True, exist_ok=True)
    blob = _blob_bytes(params)
    digest = hashlib.sha256(blob).hexdigest()
    table = []
    offset = 0
    for name, arr in params.items():
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * BLOB_DTYPE.itemsize
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "params": table,
        "rng_seed": rng_seed,
        "step": step,
        "blob_sha256": digest,
        "extra": extra or {},
    }
    (path / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (path / BLOB_NAME).write_bytes(blob)
    return digest


def load_bundle(dir_path, dtype=np.float64) -> Bundle:
    """Read a bundle; parameters are cast to `dtype` (exact for float64)."""
    path = Path(dir_path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {manifest.get('format_version')}"
        )
    blob = (path / BLOB_NAME).read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise CheckpointError("parameter blob does not match manifest digest")
    items = []
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * BLOB_DTYPE.itemsize
        if end > len(blob):
            raise CheckpointError(f"blob truncated at parameter {entry['name']!r}")
        arr = np.frombuffer(blob[start:end], dtype=BLOB_DTYPE).reshape(shape)
        items.append((entry["name"], arr.astype(dtype)))
    return Bundle(
        kind=manifest["kind"],
        config=manifest["config"],
        params=ParamSet(items),
        step=manifest["step"],
        rng_seed=manifest["rng_seed"],
        extra=manifest.get("extra", {}),
        digest=digest,
    )
