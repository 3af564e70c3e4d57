import struct

import numpy as np
import pytest

from wap_adapter import checkpoint as ck


def _tensors():
    rng = np.random.default_rng(0)
    return {"b/w": rng.normal(size=(3, 4)), "a": rng.normal(size=5), "c/scalar": np.array(2.5)}


class TestCheckpoint:
    def test_round_trip_float32_exact(self, tmp_path):
        t = _tensors()
        ck.save_checkpoint(tmp_path / "x.wapc", t)
        back = ck.load_checkpoint(tmp_path / "x.wapc")
        assert sorted(back) == sorted(t)
        for k in t:
            assert back[k].shape == np.shape(t[k])
            np.testing.assert_array_equal(back[k], np.asarray(t[k], np.float32).astype(np.float64))

    def test_names_sorted_and_order_independent(self):
        t = _tensors()
        data = ck.encode_checkpoint(t)
        assert data == ck.encode_checkpoint(dict(reversed(list(t.items()))))
        assert struct.unpack_from("<II", data, 4) == (1, 3)
        (n,) = struct.unpack_from("<I", data, 12)
        assert data[16:16 + n] == b"a"

    def test_rejects(self):
        data = ck.encode_checkpoint(_tensors())
        with pytest.raises(ck.CheckpointError, match="bad magic"):
            ck.decode_checkpoint(b"NOPE" + data[4:])
        with pytest.raises(ck.CheckpointError):
            ck.decode_checkpoint(data[:-3])
        with pytest.raises(ck.CheckpointError):
            ck.decode_checkpoint(data + b"\x00")
        with pytest.raises(ck.CheckpointError):
            ck.encode_checkpoint({"x": np.array([np.inf])})

    def test_prefix_helpers(self):
        t = ck.with_prefix("student/", {"a": 1, "b": 2})
        assert sorted(t) == ["student/a", "student/b"]
        assert ck.strip_prefix("student/", {**t, "teacher/a": 3}) == {"a": 1, "b": 2}
