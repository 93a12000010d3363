"""Checkpoints as a JSON manifest plus one raw little-endian payload file.

``<stem>.json`` lists every array (name, shape, dtype, byte offset, byte
length) and free-form metadata; ``<stem>.bin`` holds the concatenated
array bytes.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FORMAT = "dasnn-checkpoint-v1"


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``arrays`` and ``meta``. Returns the manifest path."""
    manifest_path, payload_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    tmp_payload = payload_path.with_name(payload_path.name + ".tmp")
    with open(tmp_payload, "wb") as f:
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                            "offset": offset, "nbytes": len(raw)})
            f.write(raw)
            offset += len(raw)
    manifest = {"format": FORMAT, "payload": payload_path.name, "tensors": entries, "meta": meta or {}}
    tmp_manifest = manifest_path.with_name(manifest_path.name + ".tmp")
    tmp_manifest.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp_payload, payload_path)
    os.replace(tmp_manifest, manifest_path)
    return manifest_path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path, payload_path = _paths(path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest {manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path}: unknown checkpoint format {manifest.get('format')!r}")
    payload = (manifest_path.parent / manifest["payload"]).read_bytes()
    arrays = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise ValueError(f"{payload_path}: payload too short for tensor {e['name']}")
        dtype = np.dtype(e["dtype"])
        arr = np.frombuffer(payload, dtype=dtype, count=e["nbytes"] // dtype.itemsize, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dtype.newbyteorder("="))
    return arrays, manifest["meta"]
