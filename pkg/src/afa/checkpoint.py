"""Checkpoint directories: one tensor file per array plus a JSON manifest."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor
from .tensor_io import load_tensor_file, save_tensor_file


class CheckpointError(ValueError):
    pass


def save_checkpoint(dir_path, params: dict[str, np.ndarray],
                    buffers: dict[str, np.ndarray], meta: dict) -> Path:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    doc = {"format": "afa-checkpoint", "version": 1, "meta": meta,
           "params": {}, "buffers": {}}
    for section, arrays in (("params", params), ("buffers", buffers)):
        for name in sorted(arrays):
            rel = f"{name}.afat"
            save_tensor_file(dir_path / rel, Tensor(arrays[name]))
            doc[section][name] = rel
    path = dir_path / "checkpoint.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return dir_path


def load_checkpoint(dir_path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict]:
    dir_path = Path(dir_path)
    path = dir_path / "checkpoint.json"
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {dir_path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != "afa-checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint manifest")
    out = []
    for section in ("params", "buffers"):
        arrays = {}
        for name, rel in doc[section].items():
            arrays[name] = load_tensor_file(dir_path / rel).data
        out.append(arrays)
    return out[0], out[1], doc["meta"]
