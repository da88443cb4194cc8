"""Parameter checkpoints.

Layout: a numpy ``.npz`` archive. Each parameter is stored as a float64 array
under its dotted name (``"actor_d.0.weights"``). The extra member
``__manifest__`` holds UTF-8 JSON::

    {"format": "premig-params", "version": 1,
     "shapes": {"<name>": [d0, d1, ...], ...},
     "meta": {...free-form, JSON-serializable...}}

Loading verifies format, version and every shape against the manifest.
"""
from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from premig.numerics.tensor import Tensor

FORMAT = "premig-params"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(path, params: dict, meta: dict | None = None) -> None:
    arrays = {}
    for name, value in params.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        arrays[name] = np.asarray(data, dtype=np.float64)
    manifest = {"format": FORMAT, "version": VERSION,
                "shapes": {k: list(v.shape) for k, v in arrays.items()},
                "meta": meta or {}}
    blob = np.frombuffer(json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, __manifest__=blob, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_params(path) -> tuple[dict, dict]:
    """Return ``(arrays, meta)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        if "__manifest__" not in z.files:
            raise CheckpointError(f"{path}: missing manifest")
        manifest = json.loads(bytes(z["__manifest__"]).decode("utf-8"))
        if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint {manifest.get('format')} "
                                  f"v{manifest.get('version')}")
        arrays = {}
        for name, shape in manifest["shapes"].items():
            a = z[name]
            if list(a.shape) != shape:
                raise CheckpointError(f"{path}: {name} has shape {a.shape}, manifest says {shape}")
            arrays[name] = a
    return arrays, manifest.get("meta", {})


def flatten(prefix: str, obj) -> dict:
    """Dotted-name view of params held in dataclasses / lists / dicts."""
    out = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif hasattr(obj, "tensors"):
        for k, t in obj.tensors().items():
            out[f"{prefix}.{k}" if prefix else k] = t
    elif isinstance(obj, dict):
        for k, v in obj.items():
            out.update(flatten(f"{prefix}.{k}" if prefix else str(k), v))
    elif isinstance(obj, (list, tuple)):
        for k, v in enumerate(obj):
            out.update(flatten(f"{prefix}.{k}" if prefix else str(k), v))
    return out


def assign(target: dict, arrays: dict) -> None:
    """Copy loaded arrays into the tensors of a ``flatten`` view."""
    missing = set(target) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[:5]}")
    for name, t in target.items():
        if arrays[name].shape != t.data.shape:
            raise CheckpointError(f"{name}: shape {arrays[name].shape} != {t.data.shape}")
        t.data = np.array(arrays[name], dtype=np.float64)
