import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lla import storage
from lla.errors import FormatError, InputError
from lla.locker import lock_model
from lla.model import model_logits
from lla.rng import SplitMix64


@given(rows=st.integers(0, 6), cols=st.integers(0, 6), seed=st.integers(0, 2**32))
@settings(max_examples=25, deadline=None)
def test_tensor_round_trip(rows, cols, seed, tmp_path_factory):
    m = SplitMix64(seed).normal(rows * cols).reshape(rows, cols).astype(np.float32)
    path = tmp_path_factory.mktemp("t") / "m.llat"
    storage.save_tensor(m, path)
    back = storage.load_tensor(path)
    assert back.dtype == np.float32 and back.shape == m.shape
    assert back.tobytes() == m.tobytes()


def test_tensor_file_size(tmp_path):
    # magic(4) + version(4) + ndims(4) + 2 dims * 8 + 6 floats * 4
    path = tmp_path / "a.llat"
    storage.save_tensor(np.ones((3, 2), np.float32), path)
    assert path.stat().st_size == 12 + 16 + 24


def test_tensor_layout(tmp_path):
    path = tmp_path / "a.llat"
    storage.save_tensor(np.array([[1.0, 2.0]], np.float32), path)
    raw = path.read_bytes()
    assert raw[:4] == b"LLAT"
    assert raw[4:12] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert raw[12:28] == (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
    assert np.frombuffer(raw[28:], "<f4").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:-3],
    lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:],
    lambda b: b[:12] + (2**62).to_bytes(8, "little") + b[20:],
])
def test_tensor_format_errors(tmp_path, mutate):
    path = tmp_path / "a.llat"
    storage.save_tensor(np.ones((3, 2), np.float32), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError):
        storage.load_tensor(path)


def test_model_round_trip(tmp_path, planted):
    storage.save_model(planted, tmp_path / "m")
    back = storage.load_model(tmp_path / "m")
    assert np.array_equal(model_logits(back, [1, 2, 3]), model_logits(planted, [1, 2, 3]))


def test_locked_round_trip_holds_no_key(tmp_path, planted):
    out = lock_model(planted, 32, 16, seed=2)
    storage.save_locked_model(out.locked, tmp_path / "lk")
    manifest = (tmp_path / "lk" / "manifest.json").read_text()
    assert "key_perm" not in manifest and "bits" not in manifest
    back = storage.load_locked_model(tmp_path / "lk")
    toks = [3, 1, 4, 1, 5]
    assert np.array_equal(back.logits(toks, out.key), out.locked.logits(toks, out.key))


def test_tokens_round_trip(tmp_path):
    seqs = [[1, 2, 3], [0], [5, 5]]
    storage.write_tokens(seqs, tmp_path / "t.txt")
    assert storage.read_tokens(tmp_path / "t.txt") == seqs


def test_tokens_bad_file(tmp_path):
    (tmp_path / "t.txt").write_text("1 2 x\n")
    with pytest.raises((FormatError, InputError)):
        storage.read_tokens(tmp_path / "t.txt")
