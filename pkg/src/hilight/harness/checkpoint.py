"""Checkpoints: JSON manifest plus a little-endian float32 parameter blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..nn import Module

MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(ValueError):
    pass


def save_checkpoint(module: Module, directory, config: dict, step: int) -> Path:
    """Write every parameter in inventory order; values must be float32-exact."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    inventory = []
    chunks = []
    offset = 0
    for name, p in module.named_parameters():
        raw = p.data.astype("<f4")
        if not np.array_equal(raw.astype(np.float64), p.data):
            raise CheckpointError(f"parameter {name} is not float32-representable; snap before saving")
        chunks.append(raw.tobytes())
        inventory.append({"name": name, "shape": list(p.shape), "offset": offset, "count": int(p.data.size)})
        offset += raw.nbytes
    manifest = {
        "format": "hilight-checkpoint",
        "dtype": "float32-le",
        "blob": BLOB,
        "step": int(step),
        "config": config,
        "parameters": inventory,
    }
    (directory / BLOB).write_bytes(b"".join(chunks))
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {path}: {exc.strerror}") from exc


def load_checkpoint(module: Module, directory, prefix: str = "", strict: bool = True) -> dict:
    """Copy parameters from ``directory`` into ``module``.

    Manifest entry ``prefix + name`` feeds module parameter ``name``. With
    ``strict`` the (prefixed) inventory must match the module exactly.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    blob = (directory / manifest.get("blob", BLOB)).read_bytes()
    entries = {e["name"]: e for e in manifest["parameters"]}
    wanted = dict(module.named_parameters())
    for name, p in wanted.items():
        entry = entries.get(prefix + name)
        if entry is None:
            raise CheckpointError(f"checkpoint {directory} has no parameter {prefix + name}")
        if tuple(entry["shape"]) != p.shape:
            raise CheckpointError(
                f"parameter {prefix + name}: checkpoint shape {tuple(entry['shape'])} != model shape {p.shape}"
            )
    if strict:
        extra = sorted(n for n in entries if n.startswith(prefix) and n[len(prefix) :] not in wanted)
        if extra:
            raise CheckpointError(f"checkpoint parameter {extra[0]} has no counterpart in the model")
    for name, p in wanted.items():
        entry = entries[prefix + name]
        values = np.frombuffer(blob, dtype="<f4", count=entry["count"], offset=entry["offset"])
        p.data[...] = values.astype(np.float64).reshape(p.shape)
    return manifest
