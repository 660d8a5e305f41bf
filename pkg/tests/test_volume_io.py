import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixelfit.errors import DataError
from fixelfit.volume_io import (
    HEADER_SIZE,
    VOX_OFFSET,
    Volume,
    read_nifti,
    write_nifti,
)


def _roundtrip(tmp_path, vol, name="v.nii"):
    p = os.path.join(tmp_path, name)
    write_nifti(vol, p)
    return p, read_nifti(p)


class TestRoundTrip:
    def test_exact_data(self, tmp_path, rng):
        data = rng.standard_normal((3, 4, 5, 6)).astype(np.float32)
        _, back = _roundtrip(tmp_path, Volume(data=data, voxel_size=(2.0, 2.0, 2.5)))
        np.testing.assert_array_equal(back.data, data)
        assert back.dims == (3, 4, 5, 6)
        assert back.voxel_size == (2.0, 2.0, 2.5)

    def test_affine_round_trip(self, tmp_path, rng):
        affine = np.eye(4)
        affine[:3, 3] = [1.0, -2.0, 3.0]
        vol = Volume(data=np.zeros((2, 2, 2, 1), np.float32), affine=affine)
        _, back = _roundtrip(tmp_path, vol)
        np.testing.assert_array_equal(back.affine, affine)

    def test_file_size(self, tmp_path):
        p, _ = _roundtrip(tmp_path, Volume(data=np.zeros((2, 2, 2, 1), np.float32)))
        assert os.path.getsize(p) == VOX_OFFSET + 8 * 4

    def test_3d_input_gets_singleton_t(self, tmp_path):
        _, back = _roundtrip(tmp_path, Volume(data=np.ones((4, 3, 2), np.float32)))
        assert back.dims == (4, 3, 2, 1)

    def test_fortran_order_on_disk(self, tmp_path):
        data = np.arange(8, dtype=np.float32).reshape(2, 2, 2, 1)
        p, _ = _roundtrip(tmp_path, Volume(data=data))
        with open(p, "rb") as f:
            f.seek(VOX_OFFSET)
            flat = np.frombuffer(f.read(), dtype="<f4")
        # x varies fastest
        np.testing.assert_array_equal(flat, data.reshape(-1, order="F"))


class TestHeaderValidation:
    def test_detached_header_rejected(self, tmp_path):
        p, _ = _roundtrip(tmp_path, Volume(data=np.zeros((2, 2, 2, 1), np.float32)))
        raw = bytearray(open(p, "rb").read())
        raw[344:348] = b"ni1\x00"
        bad = os.path.join(tmp_path, "detached.nii")
        open(bad, "wb").write(bytes(raw))
        with pytest.raises(DataError, match="ni1"):
            read_nifti(bad)

    def test_bad_magic_rejected(self, tmp_path):
        p, _ = _roundtrip(tmp_path, Volume(data=np.zeros((2, 2, 2, 1), np.float32)))
        raw = bytearray(open(p, "rb").read())
        raw[344:348] = b"xxx\x00"
        bad = os.path.join(tmp_path, "bad.nii")
        open(bad, "wb").write(bytes(raw))
        with pytest.raises(DataError, match="magic"):
            read_nifti(bad)

    def test_unsupported_datatype(self, tmp_path):
        p, _ = _roundtrip(tmp_path, Volume(data=np.zeros((2, 2, 2, 1), np.float32)))
        raw = bytearray(open(p, "rb").read())
        struct.pack_into("<h", raw, 70, 2)  # uint8
        bad = os.path.join(tmp_path, "dtype.nii")
        open(bad, "wb").write(bytes(raw))
        with pytest.raises(DataError, match="datatype"):
            read_nifti(bad)

    def test_truncated_data(self, tmp_path):
        p, _ = _roundtrip(tmp_path, Volume(data=np.zeros((4, 4, 4, 2), np.float32)))
        raw = open(p, "rb").read()
        bad = os.path.join(tmp_path, "trunc.nii")
        open(bad, "wb").write(raw[:-10])
        with pytest.raises(DataError, match="truncated"):
            read_nifti(bad)

    def test_not_a_nifti(self, tmp_path):
        bad = os.path.join(tmp_path, "junk.nii")
        open(bad, "wb").write(b"\x00" * 500)
        with pytest.raises(DataError):
            read_nifti(bad)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="no such file"):
            read_nifti(os.path.join(tmp_path, "absent.nii"))


def _byteswap_file(src: str, dst: str) -> None:
    """Rewrite a (little-endian float32) .nii as its big-endian twin."""
    raw = open(src, "rb").read()
    hdr, ext, data = raw[:HEADER_SIZE], raw[HEADER_SIZE:VOX_OFFSET], raw[VOX_OFFSET:]
    from fixelfit.volume_io import _HDR_FMT
    fields = struct.unpack("<" + _HDR_FMT, hdr)
    swapped = struct.pack(">" + _HDR_FMT, *fields)
    arr = np.frombuffer(data, dtype="<f4").astype(">f4")
    with open(dst, "wb") as f:
        f.write(swapped)
        f.write(ext)
        f.write(arr.tobytes())


class TestEndianness:
    def test_byteswapped_file_parses_identically(self, tmp_path, rng):
        data = rng.standard_normal((3, 2, 4, 2)).astype(np.float32)
        p, orig = _roundtrip(tmp_path, Volume(data=data))
        swapped = os.path.join(tmp_path, "swapped.nii")
        _byteswap_file(p, swapped)
        back = read_nifti(swapped)
        np.testing.assert_array_equal(back.data, orig.data)
        assert back.dims == orig.dims


class TestScaling:
    def test_int16_slope_inter(self, tmp_path):
        # hand-build an int16 file with scl_slope 2, scl_inter 1
        p = os.path.join(tmp_path, "int16.nii")
        write_nifti(Volume(data=np.zeros((1, 1, 1, 1), np.float32)), p)
        raw = bytearray(open(p, "rb").read()[:VOX_OFFSET])
        struct.pack_into("<h", raw, 70, 4)    # datatype int16
        struct.pack_into("<h", raw, 72, 16)   # bitpix
        struct.pack_into("<f", raw, 112, 2.0)  # scl_slope
        struct.pack_into("<f", raw, 116, 1.0)  # scl_inter
        with open(p, "wb") as f:
            f.write(bytes(raw))
            f.write(np.array([3], dtype="<i2").tobytes())
        vol = read_nifti(p)
        assert vol.data.reshape(-1)[0] == pytest.approx(7.0)

    def test_zero_slope_means_unscaled(self, tmp_path):
        p = os.path.join(tmp_path, "raw.nii")
        write_nifti(Volume(data=np.full((1, 1, 1, 1), 5.0, np.float32)), p)
        raw = bytearray(open(p, "rb").read())
        struct.pack_into("<f", raw, 112, 0.0)
        struct.pack_into("<f", raw, 116, 99.0)
        open(p, "wb").write(bytes(raw))
        assert read_nifti(p).data.reshape(-1)[0] == pytest.approx(5.0)


@settings(max_examples=30, deadline=None)
@given(
    dims=st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 4)),
    seed=st.integers(0, 2 ** 31 - 1),
)
def test_property_round_trip(tmp_path_factory, dims, seed):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal(dims).astype(np.float32)
    vol = Volume(data=data)
    p = os.path.join(tmp_path_factory.mktemp("nii"), "x.nii")
    write_nifti(vol, p)
    back = read_nifti(p)
    np.testing.assert_array_equal(back.data, data)
