import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from svdeconv.container import (
    ContainerError,
    decode_meta,
    dumps,
    encode_meta,
    loads,
    read_container,
    write_container,
)

DTYPES = [np.float64, np.float32, np.uint8, np.int64]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(DTYPES).flatmap(
    lambda dt: arrays(dt, st.lists(st.integers(0, 5), min_size=0, max_size=4).map(tuple))))
def test_roundtrip_bitwise(arr):
    back = loads(dumps({"a": arr, "b": arr[..., None]}))
    assert back["a"].dtype == arr.dtype and back["a"].shape == arr.shape
    assert back["a"].tobytes() == arr.tobytes()


def test_layout_is_little_endian():
    blob = dumps({"x": np.array([1.5], dtype=np.float64)})
    assert blob[:4] == b"SVC1"
    assert struct.unpack("<Q", blob[4:12])[0] == 1
    assert struct.unpack("<Q", blob[12:20])[0] == 1
    assert blob[20:21] == b"x"
    assert struct.unpack("<Q", blob[21:29])[0] == 1      # rank
    assert struct.unpack("<Q", blob[29:37])[0] == 1      # dim
    assert blob[37] == 1                                 # float64 tag
    assert struct.unpack("<d", blob[38:46])[0] == 1.5


def test_unknown_tag_rejected():
    blob = bytearray(dumps({"x": np.zeros(2)}))
    blob[37] = 9
    with pytest.raises(ContainerError, match="tag"):
        loads(bytes(blob))


@pytest.mark.parametrize("blob", [b"", b"XXXX" + b"\0" * 8, b"SVC1\x01"])
def test_corrupt_rejected(blob):
    with pytest.raises(ContainerError):
        loads(blob)


def test_truncated_rejected():
    blob = dumps({"x": np.arange(10.0)})
    with pytest.raises(ContainerError):
        loads(blob[:-3])


def test_unsupported_dtype_rejected():
    with pytest.raises(ContainerError):
        dumps({"c": np.zeros(2, dtype=np.complex128)})


def test_meta_roundtrip_and_files(tmp_path):
    meta = {"a": [1, 2], "b": {"c": "x"}}
    p = tmp_path / "f.svc"
    write_container(p, {"m": encode_meta(meta), "v": np.eye(3, dtype=np.float32)})
    rec = read_container(p)
    assert decode_meta(rec["m"]) == meta
    assert rec["v"].dtype == np.float32 and np.array_equal(rec["v"], np.eye(3))
    assert not (tmp_path / "f.svc.tmp").exists()
    with pytest.raises(OSError):
        read_container(tmp_path / "missing.svc")
