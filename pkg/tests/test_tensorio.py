import io
import struct
from collections import OrderedDict

import numpy as np
import pytest

from drivecluster.tensorio import (TensorFormatError, dump_tensors, load_tensors, read_checkpoint,
                                   read_tensors, write_checkpoint, write_tensors)


def test_layout_by_hand():
    buf = io.BytesIO()
    dump_tensors([np.array([[1.0, 2.0, 3.0]], dtype=np.float32)], buf)
    expected = b"DSC1" + struct.pack("<IIII", 1, 2, 1, 3) + struct.pack("<3f", 1, 2, 3)
    assert buf.getvalue() == expected


def test_round_trip_mixed_ranks(tmp_path):
    rng = np.random.default_rng(0)
    arrays = [rng.normal(size=(3, 4, 5)).astype(np.float32), np.float32(2.5) * np.ones(()),
              np.zeros((0, 3), dtype=np.float32), rng.normal(size=7)]
    back = read_tensors(write_tensors(tmp_path / "t.dsc1", arrays))
    assert len(back) == 4
    for a, b in zip(arrays, back):
        assert b.dtype == np.float32 and b.shape == np.shape(a)
        np.testing.assert_array_equal(b, np.asarray(a, dtype=np.float32))


def test_bad_magic_and_truncation():
    with pytest.raises(TensorFormatError):
        load_tensors(io.BytesIO(b"NOPE"))
    buf = io.BytesIO()
    dump_tensors([np.ones(10)], buf)
    with pytest.raises(TensorFormatError):
        load_tensors(io.BytesIO(buf.getvalue()[:-4]))


def test_checkpoint_round_trip(tmp_path):
    params = OrderedDict([("w", np.arange(6, dtype=np.float32).reshape(2, 3)), ("b", np.ones(3, np.float32))])
    write_checkpoint(tmp_path / "c.ckpt", params, {"d_f": 8, "cfg": {"a": 1}})
    back, meta = read_checkpoint(tmp_path / "c.ckpt")
    assert list(back) == ["w", "b"]
    np.testing.assert_array_equal(back["w"], params["w"])
    assert meta == {"d_f": 8, "cfg": {"a": 1}}
    with pytest.raises(TensorFormatError):
        read_checkpoint(write_tensors(tmp_path / "x.dsc1", [np.ones(2)]))
