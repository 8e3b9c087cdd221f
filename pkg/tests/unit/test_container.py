"""Unit tests of the CQT1 tensor container."""

import struct

import numpy as np
import pytest

from cardioquant.container import (
    ContainerError,
    decode_tensors,
    encode_tensors,
    read_tensors,
    write_tensors,
)


def test_file_round_trip(tmp_path):
    """Shapes, names, order and bits survive a write and read."""
    rng = np.random.default_rng(0)
    tensors = {
        "enc0/conv1/weight": rng.normal(size=(4, 1, 3, 3)).astype(np.float32),
        "scalar": np.array(2.5, dtype=np.float32),
        "images": rng.normal(size=(2, 8, 8)).astype(np.float32),
    }
    path = tmp_path / "model.cqt"
    write_tensors(path, tensors)
    restored = read_tensors(path)
    assert list(restored) == list(tensors)
    for name, array in tensors.items():
        assert restored[name].shape == array.shape
        assert restored[name].tobytes() == array.tobytes()


def test_layout_of_single_tensor():
    """The byte layout matches the documented format."""
    payload = encode_tensors({"ab": np.array([1.0, 2.0], dtype=np.float32)})
    expected = (
        b"CQT1"
        + struct.pack("<I", 1)
        + struct.pack("<I", 2)
        + b"ab"
        + struct.pack("<I", 1)
        + struct.pack("<Q", 2)
        + np.array([1.0, 2.0], dtype="<f4").tobytes()
    )
    assert payload == expected


def test_bad_magic_reports_offset_zero():
    """A wrong magic fails at byte offset 0."""
    with pytest.raises(ContainerError) as err:
        decode_tensors(b"XXXX" + struct.pack("<I", 0))
    assert err.value.offset == 0
    assert "offset 0" in str(err.value)


def test_truncated_payload_reports_offset():
    """Cutting values short names the offset where reading stopped."""
    payload = encode_tensors({"w": np.ones(4, dtype=np.float32)})
    with pytest.raises(ContainerError) as err:
        decode_tensors(payload[:-3])
    assert err.value.offset == len(payload) - 16


def test_trailing_bytes_refused():
    """Bytes after the last tensor are an error."""
    payload = encode_tensors({"w": np.ones(1, dtype=np.float32)})
    with pytest.raises(ContainerError) as err:
        decode_tensors(payload + b"\x00")
    assert err.value.offset == len(payload)


def test_duplicate_names_refused():
    """A name may appear only once."""
    single = encode_tensors({"w": np.ones(1, dtype=np.float32)})
    body = single[8:]
    payload = b"CQT1" + struct.pack("<I", 2) + body + body
    with pytest.raises(ContainerError, match="Duplicate"):
        decode_tensors(payload)


def test_empty_container():
    """Zero tensors is a valid container."""
    assert decode_tensors(encode_tensors({})) == {}
