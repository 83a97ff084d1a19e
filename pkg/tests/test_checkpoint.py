import numpy as np
import pytest

from layermatrix.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from layermatrix.config import Config


def sample_checkpoint():
    rng = np.random.default_rng(0)
    return Checkpoint(
        config=Config().to_dict(),
        params={"b.weight": rng.standard_normal((2, 3)).astype(np.float32), "a.bias": np.arange(4.0)},
        optimizer={"m/a.bias": np.zeros(4), "v/a.bias": np.full(4, 1e-3)},
        meta={"epoch": 3, "step": 120, "adam_t": 120, "seed": 0,
              "rng_state": np.random.default_rng(5).bit_generator.state},
    )


def test_roundtrip_is_byte_identical(tmp_path):
    ck = sample_checkpoint()
    p1 = save_checkpoint(ck, tmp_path / "a.mxn")
    loaded = load_checkpoint(p1)
    p2 = save_checkpoint(loaded, tmp_path / "b.mxn")
    assert p1.read_bytes() == p2.read_bytes()
    for k, v in ck.params.items():
        assert loaded.params[k].dtype == v.dtype and np.array_equal(loaded.params[k], v)
    assert loaded.meta == ck.meta and loaded.config == ck.config


def test_header_is_versioned_little_endian():
    buf = sample_checkpoint().to_bytes()
    assert buf[:8] == b"MXNCKPT\0"
    assert int.from_bytes(buf[8:12], "little") == 1


def test_big_endian_input_is_normalized():
    ck = sample_checkpoint()
    ck.params["a.bias"] = ck.params["a.bias"].astype(">f8")
    loaded = Checkpoint.from_bytes(ck.to_bytes())
    assert np.array_equal(loaded.params["a.bias"], np.arange(4.0))
    assert loaded.to_bytes() == sample_checkpoint().to_bytes()


def test_corrupt_inputs():
    buf = sample_checkpoint().to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"garbage" + buf)
    with pytest.raises(CheckpointError, match="truncated"):
        Checkpoint.from_bytes(buf[:-5])
    bad = bytearray(buf)
    bad[8] = 9
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(bytes(bad))
    with pytest.raises(CheckpointError):
        load_checkpoint("/nonexistent/x.mxn")
