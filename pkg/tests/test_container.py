import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from opengcd import container as ct


def test_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    entries = {"F_patch": rng.normal(size=(3, 5, 4)).astype(np.float32),
               "labels": rng.integers(-5, 5, 7), "név": np.float32(2.5)}
    path = tmp_path / "x.ften"
    ct.write_container(path, entries)
    back = ct.read_container(path)
    assert list(back) == list(entries)
    for k, v in entries.items():
        assert back[k].tobytes() == np.asarray(v).astype(back[k].dtype).tobytes()
        assert back[k].shape == np.shape(v)


def test_scalar_entry_has_one_element():
    raw = ct.encode({"s": np.float32(1.5)})
    # header 10 + name 2+1 + dtype/rank 2 + no dims + 4 payload bytes
    assert len(raw) == 10 + 3 + 2 + 4
    assert ct.decode(raw)["s"].shape == ()


@settings(max_examples=40)
@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=4),
              elements=st.floats(width=32, allow_nan=False)))
def test_f32_roundtrip_property(a):
    assert ct.decode(ct.encode({"a": a}))["a"].tobytes() == a.astype("<f4").tobytes()


def test_float64_stored_as_f32_and_ints_as_i64():
    back = ct.decode(ct.encode({"x": np.array([0.1]), "b": np.array([True, False])}))
    assert back["x"].dtype == np.float32 and back["b"].dtype == np.int64


def test_bad_magic():
    raw = bytearray(ct.encode({"a": np.zeros(2)}))
    raw[:4] = b"NOPE"
    with pytest.raises(ct.MagicMismatchError) as err:
        ct.decode(bytes(raw))
    assert err.value.offset == 0


def test_truncated_payload():
    raw = ct.encode({"a": np.zeros(4, dtype=np.float32)})
    with pytest.raises(ct.TruncatedError) as err:
        ct.decode(raw[:-3])
    assert err.value.offset == len(raw) - 16


def test_duplicate_names():
    with pytest.raises(ct.DuplicateNameError):
        ct.encode([("a", np.zeros(1)), ("a", np.ones(1))])
    one = ct.encode({"a": np.zeros(1, dtype=np.float32)})
    body = one[10:]
    raw = b"FTEN" + struct.pack("<HI", 1, 2) + body + body
    with pytest.raises(ct.DuplicateNameError) as err:
        ct.decode(raw)
    assert err.value.offset == 10 + len(body)


def test_unsupported_dtype():
    raw = bytearray(ct.encode({"a": np.zeros(1, dtype=np.float32)}))
    raw[10 + 3] = 7  # dtype byte of the first entry
    with pytest.raises(ct.UnsupportedDtypeError) as err:
        ct.decode(bytes(raw))
    assert err.value.offset == 13
    with pytest.raises(ct.UnsupportedDtypeError):
        ct.encode({"c": np.array([1 + 2j])})


def test_errors_are_distinct():
    kinds = [ct.MagicMismatchError, ct.TruncatedError, ct.DuplicateNameError, ct.UnsupportedDtypeError]
    assert len(set(kinds)) == 4
    assert all(issubclass(k, ct.ContainerError) for k in kinds)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    path = tmp_path / "out.ften"
    ct.write_container(path, {"a": np.zeros(2)})
    ct.write_container(path, {"a": np.ones(2)})
    assert [p.name for p in tmp_path.iterdir()] == ["out.ften"]
    assert ct.read_container(path)["a"].tolist() == [1.0, 1.0]
