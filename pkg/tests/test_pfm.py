"""PFM file format round trips and malformed-input handling."""

import struct

import numpy as np
import pytest

from ffdepth.pfm import PfmError, read_pfm, write_pfm


def test_grayscale_round_trip_bit_exact(tmp_path, rng):
    data = rng.standard_normal((7, 5)).astype(np.float32)
    p = tmp_path / "d.pfm"
    write_pfm(p, data)
    back, scale = read_pfm(p)
    assert back.dtype == np.float32
    assert scale == 1.0
    assert np.array_equal(back, data)


def test_color_round_trip_bit_exact(tmp_path, rng):
    data = rng.standard_normal((4, 6, 3)).astype(np.float32)
    p = tmp_path / "c.pfm"
    write_pfm(p, data, scale=2.5)
    back, scale = read_pfm(p)
    assert scale == 2.5
    assert np.array_equal(back, data)


def test_hand_built_file_little_endian_bottom_up(tmp_path):
    # 2x2 grayscale, rows stored bottom-up: file rows are [3,4] then [1,2],
    # so the decoded top-down array must be [[1,2],[3,4]].
    payload = struct.pack("<4f", 3.0, 4.0, 1.0, 2.0)
    p = tmp_path / "hand.pfm"
    p.write_bytes(b"Pf\n2 2\n-1.0\n" + payload)
    data, scale = read_pfm(p)
    assert scale == 1.0
    assert np.array_equal(data, np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))


def test_big_endian_payload(tmp_path):
    payload = struct.pack(">2f", 5.0, -6.0)
    p = tmp_path / "be.pfm"
    p.write_bytes(b"Pf\n2 1\n1.0\n" + payload)
    data, _ = read_pfm(p)
    assert np.array_equal(data, np.array([[5.0, -6.0]], dtype=np.float32))


def test_nonfinite_values_survive(tmp_path):
    data = np.array([[np.nan, np.inf], [-np.inf, 0.0]], dtype=np.float32)
    p = tmp_path / "nan.pfm"
    write_pfm(p, data)
    back, _ = read_pfm(p)
    assert np.isnan(back[0, 0])
    assert back[0, 1] == np.inf
    assert back[1, 0] == -np.inf


@pytest.mark.parametrize(
    "blob",
    [
        b"P6\n2 2\n-1.0\n" + b"\0" * 16,          # wrong magic
        b"Pf\n2 x\n-1.0\n" + b"\0" * 16,          # non-integer dimension
        b"Pf\n2 2\n-1.0\n" + b"\0" * 8,           # truncated pixels
        b"Pf\n2 2\n0\n" + b"\0" * 16,             # zero scale
        b"Pf\n0 2\n-1.0\n",                       # bad dimensions
        b"Pf\n2",                                 # header cut short
    ],
)
def test_malformed_files_raise(tmp_path, blob):
    p = tmp_path / "bad.pfm"
    p.write_bytes(blob)
    with pytest.raises(PfmError):
        read_pfm(p)


def test_write_rejects_bad_shape_and_scale(tmp_path, rng):
    with pytest.raises(PfmError):
        write_pfm(tmp_path / "x.pfm", rng.standard_normal((2, 2, 4)).astype(np.float32))
    with pytest.raises(PfmError):
        write_pfm(tmp_path / "y.pfm", np.zeros((2, 2), np.float32), scale=-1.0)
