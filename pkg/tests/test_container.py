"""Container format: byte-exact layout, round-trips, corruption handling."""

import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densedistill.container import read_tensor, write_pgm, write_tensor
from densedistill.errors import (
    DuplicateNameError,
    MagicError,
    OffsetError,
    ParameterError,
    TruncationError,
    VersionError,
)


def test_empty_file_is_12_byte_header(tmp_path):
    path = str(tmp_path / "empty.dten")
    write_tensor(path, {})
    blob = open(path, "rb").read()
    assert len(blob) == 12
    assert blob[:4] == b"DTEN"
    assert struct.unpack("<II", blob[4:]) == (1, 0)
    assert read_tensor(path) == {}


def test_roundtrip_f64_bitwise(tmp_path):
    path = str(tmp_path / "m.dten")
    arr = np.random.default_rng(0).standard_normal((3, 3))
    write_tensor(path, {"m": arr})
    out = read_tensor(path)["m"]
    assert out.tobytes() == arr.tobytes()
    assert out.dtype == np.float64 and out.shape == (3, 3)


def test_file_size_accounting(tmp_path):
    path = str(tmp_path / "two.dten")
    a = np.zeros((2, 3), dtype=np.float32)
    b = np.arange(4, dtype=np.int32)
    write_tensor(path, {"a": a, "b": b})
    table = (2 + 1 + 1 + 1 + 16 + 8) + (2 + 1 + 1 + 1 + 8 + 8)
    assert os.path.getsize(path) == 12 + table + a.nbytes + b.nbytes


@settings(deadline=None, max_examples=30, derandomize=True)
@given(st.integers(0, 2**31 - 1),
       st.sampled_from(["f32", "f64", "i32"]),
       st.lists(st.integers(1, 5), min_size=0, max_size=3))
def test_roundtrip_random_dtype_shape(seed, kind, shape):
    rng = np.random.default_rng(seed)
    if kind == "i32":
        arr = rng.integers(-1000, 1000, size=shape, dtype=np.int32)
    else:
        arr = rng.standard_normal(shape).astype(np.float32 if kind == "f32" else np.float64)
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "x.dten")
        write_tensor(path, {"x": arr})
        out = read_tensor(path)["x"]
        assert out.dtype == arr.dtype and out.shape == arr.shape
        assert out.tobytes() == arr.tobytes()


def test_write_then_write_is_byte_identical(tmp_path):
    rng = np.random.default_rng(1)
    sections = {"a": rng.standard_normal((4, 2)), "b": rng.integers(0, 9, (3,), dtype=np.int32)}
    p1, p2 = str(tmp_path / "1.dten"), str(tmp_path / "2.dten")
    write_tensor(p1, sections)
    write_tensor(p2, read_tensor(p1))
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_corrupted_magic(tmp_path):
    path = str(tmp_path / "bad.dten")
    write_tensor(path, {"x": np.ones(3)})
    blob = bytearray(open(path, "rb").read())
    blob[0] = ord("X")
    open(path, "wb").write(bytes(blob))
    with pytest.raises(MagicError):
        read_tensor(path)


def test_version_mismatch(tmp_path):
    path = str(tmp_path / "v.dten")
    write_tensor(path, {"x": np.ones(3)})
    blob = bytearray(open(path, "rb").read())
    blob[4:8] = struct.pack("<I", 9)
    open(path, "wb").write(bytes(blob))
    with pytest.raises(VersionError):
        read_tensor(path)


def test_truncation_fuzz_every_prefix(tmp_path):
    path = str(tmp_path / "full.dten")
    write_tensor(path, {"first": np.arange(6, dtype=np.float64).reshape(2, 3),
                        "second": np.ones(2, dtype=np.float32)})
    blob = open(path, "rb").read()
    for cut in range(len(blob)):
        chopped = str(tmp_path / "cut.dten")
        open(chopped, "wb").write(blob[:cut])
        with pytest.raises((TruncationError, MagicError)):
            read_tensor(chopped)
    # chopping the tail payload names the section
    open(str(tmp_path / "cut.dten"), "wb").write(blob[:-1])
    with pytest.raises(TruncationError, match="second"):
        read_tensor(str(tmp_path / "cut.dten"))


def test_offset_corruption(tmp_path):
    path = str(tmp_path / "o.dten")
    write_tensor(path, {"x": np.ones(3)})
    blob = bytearray(open(path, "rb").read())
    # offset field sits just before the payload: last 8 bytes of the table
    table_end = 12 + (2 + 1 + 1 + 1 + 8 + 8)
    blob[table_end - 8:table_end] = struct.pack("<Q", 2**63)
    open(path, "wb").write(bytes(blob))
    with pytest.raises(OffsetError):
        read_tensor(path)


def test_duplicate_names_rejected(tmp_path):
    with pytest.raises(DuplicateNameError):
        write_tensor(str(tmp_path / "d.dten"), [("x", np.ones(1)), ("x", np.ones(1))])


def test_name_rules(tmp_path):
    with pytest.raises(ParameterError):
        write_tensor(str(tmp_path / "n.dten"), {"x" * 65: np.ones(1)})
    with pytest.raises(ParameterError):
        write_tensor(str(tmp_path / "n.dten"), {"émoji": np.ones(1)})
    with pytest.raises(ParameterError):
        write_tensor(str(tmp_path / "n.dten"), {"x": np.ones(1, dtype=np.int64)})


def test_no_temp_files_linger(tmp_path):
    path = str(tmp_path / "t.dten")
    write_tensor(path, {"x": np.ones(4)})
    write_tensor(path, {"x": np.zeros(4)})  # overwrite via rename
    assert sorted(os.listdir(tmp_path)) == ["t.dten"]
    np.testing.assert_array_equal(read_tensor(path)["x"], np.zeros(4))


def test_pgm_format(tmp_path):
    path = str(tmp_path / "m.pgm")
    write_pgm(path, np.array([[0.0, 0.5], [1.0, 0.25]]))
    blob = open(path, "rb").read()
    assert blob.startswith(b"P5\n2 2\n255\n")
    pix = np.frombuffer(blob[len(b"P5\n2 2\n255\n"):], dtype=np.uint8)
    np.testing.assert_array_equal(pix, [0, 128, 255, 64])
    write_pgm(path, np.zeros((2, 2)))  # constant map stays black
    pix = np.frombuffer(open(path, "rb").read()[-4:], dtype=np.uint8)
    np.testing.assert_array_equal(pix, 0)
