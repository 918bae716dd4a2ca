import struct

import numpy as np
import pytest

from freqforce.checkpoint import MAGIC, CheckpointError, load_model, read_checkpoint, write_checkpoint
from freqforce.training import Trainer
from conftest import tiny_config


@pytest.fixture
def trained(tmp_path):
    tr = Trainer(tiny_config(model={"streams": ("dino", "fre", "pix")}, train={"steps": 8, "freeze_step": 2}))
    for _ in range(4):
        tr.train_step()
    path = tmp_path / "ck.fqfc"
    tr.save(path)
    return tr, path


def test_layout_starts_with_magic_and_version(trained):
    _, path = trained
    buf = path.read_bytes()
    assert buf[:4] == MAGIC
    assert struct.unpack("<I", buf[4:8])[0] == 1


def test_loaded_model_reproduces_forward_bit_exactly(trained, rng):
    tr, path = trained
    model, ck = load_model(path)
    assert model.frozen_copy and ck.header["step"] == 4
    states = {s: rng.normal(size=model.stream_shape(s, 2)) for s in model.cfg.streams}
    clocks = {s: np.array([0.2, 0.7]) for s in model.cfg.streams}
    a = tr.model(states, clocks, [0, 1])
    b = model(states, clocks, [0, 1])
    for s in model.cfg.streams:
        np.testing.assert_array_equal(a[s].data, b[s].data)


def test_all_state_is_stored(trained):
    tr, path = trained
    ck = read_checkpoint(path)
    names = {k for k, _ in tr.named_state()}
    assert names <= set(ck.arrays)
    assert any(k.startswith("bank.") for k in names)
    assert any(k.startswith("thresholds.") for k in names)
    assert any(k.startswith("optim/") for k in ck.arrays)
    assert ck.config == tr.cfg


def test_round_trip_of_raw_arrays(tmp_path, rng):
    arrays = {"a": rng.normal(size=(2, 3)), "b": np.array([np.pi]), "c": np.zeros((0,))}
    write_checkpoint(tmp_path / "x", {"hello": 1}, arrays)
    ck = read_checkpoint(tmp_path / "x")
    assert ck.header["hello"] == 1
    for k, v in arrays.items():
        np.testing.assert_array_equal(ck.arrays[k], v)


def test_version_mismatch_is_an_error(trained, tmp_path):
    _, path = trained
    buf = bytearray(path.read_bytes())
    buf[4:8] = struct.pack("<I", 2)
    bad = tmp_path / "v2.fqfc"
    bad.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(bad)


def test_bad_magic_is_an_error(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"PK\x03\x04" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(p)


def test_shape_mismatch_is_an_error(trained, tmp_path):
    tr, path = trained
    ck = read_checkpoint(path)
    arrays = dict(ck.arrays)
    name = next(k for k in arrays if k.startswith("model.") and arrays[k].ndim == 2)
    arrays[name] = arrays[name][:, :1]
    header = {k: v for k, v in ck.header.items() if k != "blobs"}
    write_checkpoint(tmp_path / "bad.fqfc", header, arrays)
    with pytest.raises(CheckpointError, match="shape"):
        load_model(tmp_path / "bad.fqfc")
