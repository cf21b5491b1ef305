"""Checkpoint container round-trip and corruption tests."""

import numpy as np
import pytest

from lmacnet import autodiff as ad
from lmacnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from lmacnet.model import Model, ModelConfig


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a.weight": rng.standard_normal((4, 7)).astype(np.float32),
        "b.bias": rng.standard_normal(5).astype(np.float32),
        "c.tau": np.float32(0.07).reshape(()),
    }
    path = tmp_path / "state.lmac"
    save_checkpoint(path, arrays)
    back = load_checkpoint(path)
    assert list(back) == list(arrays)
    for name in arrays:
        assert back[name].shape == np.asarray(arrays[name]).shape
        assert back[name].tobytes() == np.asarray(arrays[name], dtype="<f4").tobytes()


def test_save_twice_is_byte_identical(tmp_path):
    arrays = {"x": np.arange(6, dtype=np.float32).reshape(2, 3)}
    p1, p2 = tmp_path / "a.lmac", tmp_path / "b.lmac"
    save_checkpoint(p1, arrays)
    save_checkpoint(p2, arrays)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.lmac"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.lmac"
    save_checkpoint(path, {"x": np.ones((3, 3), dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_trailing_garbage(tmp_path):
    path = tmp_path / "g.lmac"
    save_checkpoint(path, {"x": np.ones(2, dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"XX")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_model_state_round_trip(tmp_path):
    cfg = ModelConfig(dims={"rgb": 8, "flow": 8, "audio": 8})
    model = Model.build(cfg, ad.RngState(0, 1))
    path = tmp_path / "model.lmac"
    save_checkpoint(path, model.state_arrays())

    clone = Model.build(cfg, ad.RngState(99, 1))
    clone.load_state(load_checkpoint(path))
    for (name, a, _), (_, b, _) in zip(model.named_parameters(), clone.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)


def test_mismatched_names_reported(tmp_path):
    cfg = ModelConfig(dims={"rgb": 8, "flow": 8, "audio": 8})
    model = Model.build(cfg, ad.RngState(0, 1))
    arrays = model.state_arrays()
    arrays.pop("score.regressor.bias")
    arrays["bogus.extra"] = np.zeros(1, dtype=np.float32)
    with pytest.raises(ValueError) as err:
        model.load_state(arrays)
    assert "score.regressor.bias" in str(err.value)
    assert "bogus.extra" in str(err.value)
