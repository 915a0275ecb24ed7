"""Checkpoints: a JSON manifest plus one raw little-endian f32 buffer.

``<stem>.json`` lists every array (name, shape, byte offset) in the order
their bytes appear in ``<stem>.bin``. Adam moments are stored as extra
entries named ``<param>#m`` / ``<param>#v`` so training can resume.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .optim import Parameter

FORMAT = "topotraj-checkpoint-1"


def _paths(path) -> tuple:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_checkpoint(path, params: Dict[str, Parameter], extra: Optional[dict] = None,
                    with_optimizer: bool = True) -> Path:
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    steps = {p.step for p in params.values()}
    with open(blob_path, "wb") as fh:
        for name, p in params.items():
            arrays = [(name, p.data)]
            if with_optimizer:
                arrays += [(name + "#m", p.m), (name + "#v", p.v)]
            for key, arr in arrays:
                buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                fh.write(buf)
                entries.append({"name": key, "shape": list(arr.shape), "offset": offset})
                offset += len(buf)
    manifest = {
        "format": FORMAT,
        "step": max(steps) if steps else 0,
        "arrays": entries,
        "extra": extra or {},
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def read_manifest(path) -> dict:
    manifest_path, _ = _paths(path)
    return json.loads(manifest_path.read_text())


def load_checkpoint(path, params: Dict[str, Parameter], strict: bool = True) -> dict:
    """Fill ``params`` in place from a checkpoint; returns the manifest."""
    manifest_path, blob_path = _paths(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path}: not a checkpoint manifest")
    blob = blob_path.read_bytes()
    stored = {}
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        stored[e["name"]] = arr
    missing = [k for k in params if k not in stored]
    if strict and missing:
        raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
    for name, p in params.items():
        if name not in stored:
            continue
        if tuple(stored[name].shape) != p.shape:
            raise ValueError(f"{name}: checkpoint shape {stored[name].shape} != model shape {p.shape}")
        p.data[...] = stored[name]
        if name + "#m" in stored:
            p.m[...] = stored[name + "#m"]
            p.v[...] = stored[name + "#v"]
        p.step = int(manifest.get("step", 0))
    return manifest
