import struct

import numpy as np
import pytest

from cxrpipe.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from cxrpipe.neuralnet import DEFAULT_ARCH, ArchSpec, HyperParams, build_model

HP = HyperParams(input_size=32, fc_units=20, freeze_depth=1)


def test_round_trip_bit_exact(tmp_path):
    state = build_model(HP, DEFAULT_ARCH, 5)
    save_checkpoint(state, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt", HP, DEFAULT_ARCH)
    assert list(loaded.params) == list(state.params)
    for k in state.params:
        assert loaded.params[k].dtype == np.float32
        assert loaded.params[k].tobytes() == state.params[k].tobytes()
    assert loaded.frozen == state.frozen


def test_header_layout(tmp_path):
    state = build_model(HP, DEFAULT_ARCH, 5)
    save_checkpoint(state, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:4] == MAGIC
    version, count = struct.unpack("<II", raw[4:12])
    assert (version, count) == (1, len(state.params))
    (name_len,) = struct.unpack("<H", raw[12:14])
    assert raw[14:14 + name_len] == b"conv1.weight"
    assert raw[14 + name_len] == 4
    assert struct.unpack("<4I", raw[15 + name_len:31 + name_len]) == (8, 1, 3, 3)


def test_arch_mismatch_names_tensor(tmp_path):
    save_checkpoint(build_model(HP, DEFAULT_ARCH, 0), tmp_path / "a.ckpt")
    other = ArchSpec(((8, 1), (12, 1), (32, 1), (64, 1)))
    with pytest.raises(CheckpointError, match="conv2.weight"):
        load_checkpoint(tmp_path / "a.ckpt", HP, other)


def test_truncated_file(tmp_path):
    save_checkpoint(build_model(HP, DEFAULT_ARCH, 0), tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    for cut in (3, 10, 20, len(raw) - 1):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "t.ckpt")


def test_bad_magic_and_version(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "x.ckpt")
    (tmp_path / "y.ckpt").write_bytes(MAGIC + struct.pack("<II", 9, 0))
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "y.ckpt")


def test_freeze_override_on_load(tmp_path):
    save_checkpoint(build_model(HP, DEFAULT_ARCH, 0), tmp_path / "a.ckpt")
    state = load_checkpoint(tmp_path / "a.ckpt", HP, DEFAULT_ARCH, freeze_depth=3)
    assert state.frozen["conv3.weight"] and not state.frozen["conv4.weight"]
