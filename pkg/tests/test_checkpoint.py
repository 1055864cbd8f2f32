import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from mms import checkpoint
from mms.checkpoint import CheckpointError, decode, encode


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       arrays(st.sampled_from([np.float32, np.float64]),
                              array_shapes(min_dims=1, max_dims=3, max_side=4),
                              elements=st.floats(-1e6, 1e6, width=32)),
                       max_size=4))
def test_roundtrip_bitwise(tensors):
    buf = encode(tensors)
    back = decode(buf)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert np.array_equal(back[k], tensors[k])
    assert encode(back) == buf


def test_layout():
    buf = encode({"ab": np.array([[1.0, 2.0]])})
    assert buf[:4] == b"MMS1"
    assert struct.unpack_from("<II", buf, 4) == (1, 1)
    assert struct.unpack_from("<I", buf, 12) == (2,)
    assert buf[16:18] == b"ab"
    assert struct.unpack_from("<BI", buf, 18) == (2, 2)
    assert struct.unpack_from("<II", buf, 23) == (1, 2)
    assert np.frombuffer(buf[31:], "<f8").tolist() == [1.0, 2.0]


def test_forced_float32():
    back = decode(encode({"x": np.array([0.1])}, dtype="float32"))
    assert back["x"].dtype == np.float32


def test_rejects_corruption(tmp_path):
    buf = encode({"x": np.ones(3)})
    with pytest.raises(CheckpointError):
        decode(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError):
        decode(buf[:-1])
    with pytest.raises(CheckpointError):
        decode(buf + b"\0")
    bad_version = buf[:4] + struct.pack("<I", 9) + buf[8:]
    with pytest.raises(CheckpointError):
        decode(bad_version)


def test_save_load(tmp_path):
    path = tmp_path / "a.mms"
    checkpoint.save(path, {"w": np.arange(4.0)})
    assert np.array_equal(checkpoint.load(path)["w"], np.arange(4.0))
    assert not (tmp_path / "a.mms.tmp").exists()
