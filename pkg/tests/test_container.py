"""Tensor-container format: round trips, determinism, corruption detection."""

import numpy as np
import pytest

from flowdit.container import load_container, save_container
from flowdit.errors import IntegrityError


def _sample_tensors():
    rng = np.random.default_rng(11)
    return {
        "alpha.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "beta": rng.standard_normal((2, 2, 2)),
        "gamma.bias": np.zeros(5, dtype=np.float32),
    }


def test_round_trip_bit_exact(tmp_path):
    path = tmp_path / "t.bin"
    tensors = _sample_tensors()
    save_container(path, tensors, config={"kind": "test", "n": 3})
    loaded, config = load_container(path)
    assert config == {"kind": "test", "n": 3}
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == tensors[name].dtype
        assert np.array_equal(loaded[name], tensors[name])


def test_save_load_save_byte_identical(tmp_path):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_container(p1, _sample_tensors(), config={"x": [1, 2]})
    loaded, config = load_container(p1)
    save_container(p2, loaded, config=config)
    assert p1.read_bytes() == p2.read_bytes()


def test_flipped_payload_byte_detected(tmp_path):
    path = tmp_path / "t.bin"
    save_container(path, _sample_tensors())
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError) as exc:
        load_container(path)
    assert "checksum" in str(exc.value)


def test_truncated_payload_detected(tmp_path):
    path = tmp_path / "t.bin"
    save_container(path, _sample_tensors())
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(IntegrityError) as exc:
        load_container(path)
    assert "truncated" in str(exc.value) or "checksum" in str(exc.value)


def test_reserved_names_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_container(tmp_path / "t.bin", {"__config__": np.zeros(1, dtype=np.float32)})


def test_loaded_arrays_are_writable(tmp_path):
    path = tmp_path / "t.bin"
    save_container(path, {"w": np.ones(4, dtype=np.float32)})
    loaded, _ = load_container(path)
    loaded["w"][0] = 5.0  # must not raise (frombuffer views are read-only)
