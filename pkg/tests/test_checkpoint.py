import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from trimix import checkpoint
from trimix.checkpoint import CheckpointError


def test_roundtrip_with_config(tmp_path):
    arrays = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.float32([1.5])}
    path = tmp_path / "x.tmx"
    checkpoint.save(path, arrays, config={"kind": "test", "n": [1, 2]})
    got, cfg = checkpoint.load(path)
    assert cfg == {"kind": "test", "n": [1, 2]}
    assert set(got) == {"a", "b"}
    for k in arrays:
        np.testing.assert_array_equal(got[k], arrays[k])


def test_magic_header(tmp_path):
    path = tmp_path / "x.tmx"
    checkpoint.save(path, {"w": np.zeros(3, np.float32)})
    assert path.read_bytes()[:4] == b"TMX1"


def test_bad_magic():
    buf = checkpoint.dumps({"w": np.zeros(2, np.float32)})
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"XXXX" + buf[4:])


def test_truncated_and_trailing():
    buf = checkpoint.dumps({"w": np.ones((4, 4), np.float32)})
    with pytest.raises(CheckpointError):
        checkpoint.loads(buf[:-3])
    with pytest.raises(CheckpointError):
        checkpoint.loads(buf + b"\0")


def test_missing_tensor_names_are_listed(tmp_path):
    path = tmp_path / "x.tmx"
    checkpoint.save(path, {"a": np.zeros(1, np.float32)})
    with pytest.raises(CheckpointError, match="missing tensors: b, c"):
        checkpoint.load(path, required=["a", "b", "c"])


def test_identical_content_identical_bytes(tmp_path):
    arrays = {"z": np.float32([3, 1]), "y": np.float32([[2]])}
    checkpoint.save(tmp_path / "1.tmx", arrays, {"k": 1})
    checkpoint.save(tmp_path / "2.tmx", dict(reversed(list(arrays.items()))), {"k": 1})
    assert checkpoint.file_digest(tmp_path / "1.tmx") == checkpoint.file_digest(tmp_path / "2.tmx")


_names = st.text(alphabet="abcdefghij._", min_size=1, max_size=12)
_arrays = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4),
                     elements=st.floats(-1e6, 1e6, width=32))


@given(st.dictionaries(_names, _arrays, min_size=1, max_size=5))
@settings(max_examples=50, deadline=None)
def test_dumps_loads_roundtrip(arrays):
    got = checkpoint.loads(checkpoint.dumps(arrays))
    assert set(got) == set(arrays)
    for k, v in arrays.items():
        assert got[k].shape == v.shape
        np.testing.assert_array_equal(got[k], v)


@given(st.recursive(st.none() | st.booleans() | st.integers(-10**6, 10**6) | st.text(max_size=8),
                    lambda c: st.lists(c, max_size=3) | st.dictionaries(st.text(max_size=5), c, max_size=3),
                    max_leaves=10))
@settings(max_examples=50, deadline=None)
def test_json_entry_roundtrip(obj):
    assert checkpoint.decode_json(checkpoint.encode_json(obj)) == obj
