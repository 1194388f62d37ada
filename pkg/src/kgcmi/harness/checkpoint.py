"""Checkpoints: ``<stem>.npz`` holds the tensors, ``<stem>.json`` the manifest.

Manifest layout::

    {
      "format": "kgcmi-checkpoint/1",
      "tensors": {"<dotted.name>": [shape...], ...},   # in parameter order
      "config": {...RunConfig fields...}
    }

Tensors are stored as float64 under their dotted names.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import InputError
from ..numerics import ModelParams
from .config import RunConfig

FORMAT = "kgcmi-checkpoint/1"


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".npz", ".json") else path


def save_checkpoint(path, params: ModelParams, config: RunConfig, exclusive: bool = True) -> Path:
    stem = _stem(path)
    manifest = {
        "format": FORMAT,
        "tensors": {name: list(params[name].shape) for name in params.names()},
        "config": config.to_dict(),
    }
    mode = "xb" if exclusive else "wb"
    with open(stem.with_suffix(".npz"), mode) as fh:
        np.savez(fh, **params.values())
    with open(stem.with_suffix(".json"), mode[0]) as fh:
        fh.write(json.dumps(manifest, indent=2) + "\n")
    return stem


def load_checkpoint(path) -> tuple[ModelParams, RunConfig]:
    stem = _stem(path)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != FORMAT:
        raise InputError(f"{stem}.json: unsupported checkpoint format {manifest.get('format')!r}")
    params = ModelParams()
    with np.load(stem.with_suffix(".npz")) as data:
        for name, shape in manifest["tensors"].items():
            if name not in data:
                raise InputError(f"checkpoint is missing tensor {name}")
            arr = data[name]
            if list(arr.shape) != shape:
                raise InputError(f"tensor {name} has shape {arr.shape}, manifest says {shape}")
            params.add(name, arr)
    return params, RunConfig.from_dict(manifest["config"])
