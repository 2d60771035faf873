import numpy as np
import pytest

from stairlab import checkpoint
from stairlab.errors import CheckpointError


def sample():
    return {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([1.5, -2.0], dtype=np.float64),
        "c": np.array([1, 2, 255], dtype=np.uint8),
    }, {"step": 7, "name": "x"}


def test_round_trip_bitwise():
    arrays, meta = sample()
    back, m = checkpoint.loads(checkpoint.dumps(arrays, meta))
    assert m == meta
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        assert back[k].tobytes() == arrays[k].tobytes()


def test_layout_header():
    data = checkpoint.dumps(*sample())
    assert data[:8] == b"STAIRCKP"
    assert int.from_bytes(data[8:12], "little") == checkpoint.FORMAT_VERSION


def test_corruption_detected():
    data = bytearray(checkpoint.dumps(*sample()))
    data[40] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint.loads(bytes(data))


def test_not_a_checkpoint():
    with pytest.raises(CheckpointError):
        checkpoint.loads(b"hello world" * 10)


def test_save_is_atomic(tmp_path):
    path = checkpoint.save(tmp_path / "x.ckpt", *sample())
    assert path.exists() and not (tmp_path / "x.ckpt.tmp").exists()
    arrays, meta = checkpoint.load(path)
    assert meta["step"] == 7
