"""Checkpoint round-trip, checksum validation, and shape errors."""

import json

import numpy as np
import pytest

from caproute.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from caproute.config import AblationConfig, tiny_config
from caproute.network import init_model


def test_round_trip_is_byte_identical(tmp_path):
    cfg = tiny_config()
    model = init_model(cfg, seed=3, dtype=np.float32)
    p1 = str(tmp_path / "a")
    save_checkpoint(p1, model)
    loaded, cfg2 = load_checkpoint(p1)
    assert cfg2.to_dict() == cfg.to_dict()
    p2 = str(tmp_path / "b")
    save_checkpoint(p2, loaded)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    for (na, ta), (nb, tb) in zip(model.named_tensors(), loaded.named_tensors()):
        assert na == nb and (ta.data == tb.data).all()


def test_ablation_mode_recorded(tmp_path):
    cfg = tiny_config()
    cfg.ablation = AblationConfig(disabled_modules=("R5",), router_mode="random")
    model = init_model(cfg, seed=1)
    assert model.M == 4
    prefix = str(tmp_path / "ab")
    save_checkpoint(prefix, model, ablation=cfg.ablation)
    loaded, cfg2 = load_checkpoint(prefix)
    assert cfg2.ablation.disabled_modules == ("R5",)
    assert cfg2.ablation.router_mode == "random"
    assert loaded.M == 4
    assert not any(name.startswith("R5.") for name, _ in loaded.named_tensors())


def test_checksum_mismatch_detected(tmp_path):
    cfg = tiny_config()
    model = init_model(cfg, seed=3)
    prefix = str(tmp_path / "c")
    save_checkpoint(prefix, model)
    blob = bytearray((tmp_path / "c.bin").read_bytes())
    blob[7] ^= 0xFF
    (tmp_path / "c.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(prefix)


def test_shape_mismatch_names_tensor(tmp_path):
    cfg = tiny_config()
    model = init_model(cfg, seed=3)
    prefix = str(tmp_path / "d")
    save_checkpoint(prefix, model)
    manifest = json.loads((tmp_path / "d.json").read_text())
    for entry in manifest["tensors"]:
        if entry["name"] == "head.W_y":
            entry["shape"] = [entry["shape"][0] + 1, entry["shape"][1]]
    (tmp_path / "d.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(prefix)
    assert "head.W_y" in str(exc.value)


def test_missing_tensor_detected(tmp_path):
    cfg = tiny_config()
    model = init_model(cfg, seed=3)
    prefix = str(tmp_path / "e")
    save_checkpoint(prefix, model)
    manifest = json.loads((tmp_path / "e.json").read_text())
    manifest["tensors"] = [t for t in manifest["tensors"] if t["name"] != "mem.W_z"]
    # keep the checksum valid: only the directory changed
    (tmp_path / "e.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(prefix)
    assert "mem.W_z" in str(exc.value)
