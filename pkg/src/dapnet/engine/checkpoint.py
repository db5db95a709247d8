"""Checkpoint files: a JSON header plus a flat name -> shape -> values map.

Layout (format version 1)::

    {
      "format": "dapnet-checkpoint",
      "version": 1,
      "header": {...},                # free-form metadata, e.g. model config
      "tensors": [
        {"name": "sa0.s0.conv0.weight", "shape": [9, 16], "data": [...]},
        ...
      ]
    }

``data`` holds the row-major float64 values. Python's ``repr`` of a float
round-trips exactly, so a save/load cycle is bit-identical. Tensors are
written sorted by name.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "dapnet-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], header: dict | None = None) -> str:
    entries = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        entries.append(
            {"name": name, "shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}
        )
    doc = {"format": FORMAT, "version": VERSION, "header": header or {}, "tensors": entries}
    return json.dumps(doc, indent=1)


def loads(text: str) -> tuple[dict, dict]:
    """Return ``(header, {name: array})``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not a checkpoint: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {doc.get('format')!r}")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    tensors = {}
    for entry in doc["tensors"]:
        shape = tuple(entry["shape"])
        arr = np.asarray(entry["data"], dtype=np.float64)
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{entry['name']}: {arr.size} values for shape {shape}")
        tensors[entry["name"]] = arr.reshape(shape)
    return doc.get("header", {}), tensors


def save(path, tensors: Mapping[str, np.ndarray], header: dict | None = None):
    Path(path).write_text(dumps(tensors, header))


def load(path) -> tuple[dict, dict]:
    return loads(Path(path).read_text())
