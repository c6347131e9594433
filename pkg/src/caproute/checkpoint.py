"""Checkpoint format: JSON manifest plus one little-endian float32 blob.

The manifest echoes the run configuration (including the ablation mode),
lists every tensor with its byte extent in the blob, and carries a sha256
of the blob so truncation or corruption is caught on load. Tensors are
concatenated in manifest order, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .config import AblationConfig, RunConfig

FORMAT_VERSION = 1
_BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    """Unreadable, corrupt, or dimensionally inconsistent checkpoint."""


def save_checkpoint(prefix: str, model, ablation: AblationConfig | None = None, extra: dict | None = None) -> str:
    """Write ``<prefix>.json`` and ``<prefix>.bin``; returns the manifest path."""
    config = model.config
    blob = bytearray()
    directory = []
    for name, t in model.named_tensors():
        raw = np.ascontiguousarray(t.data, dtype=_BLOB_DTYPE).tobytes()
        directory.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": "<f4",
                "offset": len(blob),
                "length": len(raw),
            }
        )
        blob.extend(raw)
    cfg = config.to_dict()
    if ablation is not None:
        ab = ablation.to_dict()
        cfg["ablation_disabled_modules"] = ab["disabled_modules"]
        cfg["ablation_router_mode"] = ab["router_mode"]
        cfg["ablation_agreements_enabled"] = ab["agreements_enabled"]
        cfg["ablation_memory_enabled"] = ab["memory_enabled"]
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg,
        "tensors": directory,
        "blob_file": os.path.basename(prefix) + ".bin",
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
        "extra": extra or {},
    }
    with open(prefix + ".bin", "wb") as fh:
        fh.write(bytes(blob))
    manifest_path = prefix + ".json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_checkpoint(prefix: str):
    """Rebuild the model from ``<prefix>.json``/``.bin``.

    Returns (model, config). Raises CheckpointError on checksum mismatch,
    missing tensors, or any shape disagreement (naming the tensor).
    """
    from .network import ModelParams  # deferred: network imports config only

    manifest_path = prefix + ".json"
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {manifest.get('format_version')}")
    blob_path = os.path.join(os.path.dirname(prefix) or ".", manifest["blob_file"])
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise CheckpointError("checkpoint blob checksum mismatch")

    config = RunConfig.from_dict(manifest["config"])
    config.validate()
    model = ModelParams(config, seed=0, dtype=np.float32)

    stored = {entry["name"]: entry for entry in manifest["tensors"]}
    expected = [name for name, _ in model.named_tensors()]
    missing = [n for n in expected if n not in stored]
    surplus = [n for n in stored if n not in expected]
    if missing or surplus:
        raise CheckpointError(f"tensor set mismatch: missing={missing} surplus={surplus}")
    for name, t in model.named_tensors():
        entry = stored[name]
        if tuple(entry["shape"]) != t.shape:
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {tuple(entry['shape'])} does not match configured {t.shape}"
            )
        raw = blob[entry["offset"] : entry["offset"] + entry["length"]]
        if len(raw) != entry["length"]:
            raise CheckpointError(f"tensor {name}: blob truncated")
        t.data = np.frombuffer(raw, dtype=_BLOB_DTYPE).reshape(t.shape).astype(np.float32)
    return model, config
