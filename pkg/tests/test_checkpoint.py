"""Round-trip and corruption tests for the checkpoint container."""

import struct

import numpy as np
import pytest

from seqregen.checkpoint import MAGIC, VERSION, CheckpointContainer
from seqregen.errors import CheckpointError


def _sample_container():
    rng = np.random.default_rng(7)
    return CheckpointContainer(
        tensors={
            "enc.w": rng.normal(size=(5, 3)).astype(np.float32),
            "enc.b": rng.normal(size=(3,)).astype(np.float32),
            "stats": rng.normal(size=(2, 2, 2)),
            "scalar": np.float64(3.25).reshape(()),
        },
        metadata={"kind": "test", "epochs": "7", "note": "hello world"},
    )


def test_round_trip_bit_identical(tmp_path):
    c = _sample_container()
    path = tmp_path / "model.ckpt"
    c.save(path)
    back = CheckpointContainer.load(path)
    assert back == c
    assert list(back.tensors) == list(c.tensors)
    for k in c.tensors:
        assert back.tensors[k].dtype == np.asarray(c.tensors[k]).dtype
        assert np.array_equal(back.tensors[k], c.tensors[k])
    assert back.metadata == c.metadata
    # serialization itself is deterministic
    assert c.to_bytes() == CheckpointContainer.load(path).to_bytes()


def test_non_finite_values_survive(tmp_path):
    arr = np.array([np.nan, np.inf, -np.inf, 0.0], dtype=np.float32)
    c = CheckpointContainer(tensors={"x": arr})
    c.save(tmp_path / "nf.ckpt")
    back = CheckpointContainer.load(tmp_path / "nf.ckpt")
    assert np.array_equal(back.tensors["x"], arr, equal_nan=True)


def test_empty_container(tmp_path):
    c = CheckpointContainer()
    c.save(tmp_path / "empty.ckpt")
    back = CheckpointContainer.load(tmp_path / "empty.ckpt")
    assert back.tensors == {}
    assert back.metadata == {}


def test_flipped_payload_byte_rejected(tmp_path):
    c = _sample_container()
    blob = bytearray(c.to_bytes())
    # locate the first payload byte: header is 4 + 4 + 4, then name header
    off = 12
    (name_len,) = struct.unpack_from("<I", blob, off)
    off += 4 + name_len
    (rank,) = struct.unpack_from("<I", blob, off)
    off += 4 + 8 * rank + 1
    blob[off] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        CheckpointContainer.from_bytes(bytes(blob))


def test_bad_magic_rejected():
    blob = b"XXXX" + _sample_container().to_bytes()[4:]
    with pytest.raises(CheckpointError, match="magic"):
        CheckpointContainer.from_bytes(blob)


def test_future_version_rejected():
    blob = bytearray(_sample_container().to_bytes())
    struct.pack_into("<I", blob, 4, VERSION + 1)
    with pytest.raises(CheckpointError, match="ahead"):
        CheckpointContainer.from_bytes(bytes(blob))


def test_truncated_file_rejected():
    blob = _sample_container().to_bytes()
    with pytest.raises(CheckpointError, match="truncated"):
        CheckpointContainer.from_bytes(blob[: len(blob) // 2])


def test_trailing_garbage_rejected():
    blob = _sample_container().to_bytes() + b"\x00"
    with pytest.raises(CheckpointError, match="trailing"):
        CheckpointContainer.from_bytes(blob)


def test_duplicate_names_rejected():
    a = np.zeros(2, dtype=np.float32)
    one = CheckpointContainer(tensors={"x": a}).to_bytes()
    # splice the single tensor record in twice
    head = one[:8]
    (count,) = struct.unpack_from("<I", one, 8)
    assert count == 1
    # empty metadata: the trailing block is exactly the 4-byte zero length
    tail = one[-4:]
    assert struct.unpack("<I", tail) == (0,)
    record = one[12:-4]
    doubled = head + struct.pack("<I", 2) + record + record + tail
    with pytest.raises(CheckpointError, match="duplicate"):
        CheckpointContainer.from_bytes(doubled)


def test_missing_file_raises(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        CheckpointContainer.load(tmp_path / "nope.ckpt")


def test_metadata_rejects_newline():
    c = CheckpointContainer(metadata={"k": "a\nb"})
    with pytest.raises(CheckpointError, match="not encodable"):
        c.to_bytes()


def test_magic_constant_value():
    assert MAGIC == b"PRGC"
    assert _sample_container().to_bytes()[:4] == b"PRGC"
