"""Model checkpoints: a JSON manifest of named arrays plus one raw
little-endian float32 payload (``<stem>.ckpt.json`` / ``<stem>.ckpt.raw``)."""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..volumes import atomic_write_bytes
from .unet import UNetConfig, UNetModel

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint missing, malformed, or inconsistent with the requested architecture."""


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    name = stem.name
    for suffix in (".ckpt.json", ".ckpt.raw"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return stem.with_name(name + ".ckpt.json"), stem.with_name(name + ".ckpt.raw")


def save_checkpoint(model: UNetModel, stem, extra: dict | None = None) -> tuple[Path, Path]:
    manifest_path, raw_path = _paths(stem)
    entries, chunks, offset = [], [], 0
    arrays = [(k, "parameter", p.data) for k, p in model.params.items()]
    arrays += [(k, "buffer", v) for k, v in model.buffers.items()]
    for name, kind, arr in arrays:
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
        chunks.append(payload)
        offset += len(payload)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "f32le",
        "config": asdict(model.config),
        "arrays": entries,
        "payload_bytes": offset,
    }
    if extra:
        manifest["extra"] = extra
    atomic_write_bytes(raw_path, b"".join(chunks))
    atomic_write_bytes(manifest_path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return manifest_path, raw_path


def load_checkpoint(stem, config: UNetConfig | None = None, dtype=np.float32) -> UNetModel:
    """Load a model; names and shapes are validated against ``config`` (or the stored one)."""
    manifest_path, raw_path = _paths(stem)
    if not manifest_path.exists() or not raw_path.exists():
        raise CheckpointError(f"checkpoint {manifest_path.with_suffix('')} not found")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        stored = UNetConfig(**manifest["config"])
        entries = manifest["arrays"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint manifest {manifest_path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION or manifest.get("dtype") != "f32le":
        raise CheckpointError(f"unsupported checkpoint format in {manifest_path}")
    cfg = config or stored
    model = UNetModel(cfg, seed=0, dtype=dtype)
    expected = {k: p.shape for k, p in model.params.items()}
    expected.update({k: v.shape for k, v in model.buffers.items()})
    found = {e["name"]: tuple(e["shape"]) for e in entries}
    if set(found) != set(expected):
        missing = sorted(set(expected) - set(found))
        unexpected = sorted(set(found) - set(expected))
        raise CheckpointError(f"checkpoint names do not match architecture (missing {missing}, unexpected {unexpected})")
    for name, shape in found.items():
        if shape != expected[name]:
            raise CheckpointError(f"{name}: checkpoint shape {shape} != architecture shape {expected[name]}")
    raw = raw_path.read_bytes()
    if len(raw) != manifest.get("payload_bytes", -1):
        raise CheckpointError(f"{raw_path}: payload length {len(raw)} does not match manifest")
    state = {}
    for e in entries:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = arr.astype(dtype)
    model.load_state(state)
    model.eval()
    return model
