import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelstrip.errors import (DegenerateAffine, DimensionError, GridMismatch, MalformedHeader,
                               UnsupportedDatatype)
from voxelstrip.volume_io import (BrainMask, Volume, apply_inverse, check_same_grid, nifti_bytes,
                                  read_nifti, reorient_ras, write_nifti)

from conftest import oblique_affine


def test_float32_round_trip_is_bit_exact(tmp_path, rng):
    data = rng.normal(size=(7, 5, 4)).astype(np.float32)
    vol = Volume(data, oblique_affine())
    for name in ("a.nii", "a.nii.gz"):
        write_nifti(vol, tmp_path / name)
        back = read_nifti(tmp_path / name)
        assert back.data.tobytes() == data.tobytes()
        np.testing.assert_allclose(back.affine, vol.affine, atol=1e-6)


def test_gzip_detected_by_magic_not_suffix(tmp_path, rng):
    vol = Volume(rng.normal(size=(3, 3, 3)), np.eye(4))
    raw = gzip.compress(nifti_bytes(vol.data, vol.affine))
    (tmp_path / "plain_name.nii").write_bytes(raw)
    np.testing.assert_array_equal(read_nifti(tmp_path / "plain_name.nii").data, vol.data)


def test_fortran_order_on_disk():
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    raw = nifti_bytes(data, np.eye(4))
    body = np.frombuffer(raw, dtype="<f4", offset=352)
    # x varies fastest
    assert body[:3].tolist() == [data[0, 0, 0], data[1, 0, 0], data[0, 1, 0]]


def test_header_fields():
    raw = nifti_bytes(np.zeros((2, 3, 4), np.float32), np.diag([2.0, 3.0, 4.0, 1.0]))
    assert struct.unpack("<i", raw[:4])[0] == 348
    assert raw[344:348] == b"n+1\x00"
    assert struct.unpack("<8h", raw[40:56])[:4] == (3, 2, 3, 4)
    assert struct.unpack("<f", raw[108:112])[0] == 352.0
    assert struct.unpack("<4f", raw[76:92])[1:] == (2.0, 3.0, 4.0)


def test_mask_written_as_uint8(tmp_path):
    m = BrainMask(np.eye(4, dtype=np.uint8)[:, :, None].repeat(2, axis=2), np.eye(4))
    write_nifti(m, tmp_path / "m.nii")
    raw = (tmp_path / "m.nii").read_bytes()
    assert struct.unpack("<h", raw[70:72])[0] == 2
    back = read_nifti(tmp_path / "m.nii")
    assert back.origin_dtype == "uint8"
    np.testing.assert_array_equal(BrainMask.from_volume(back).data, m.data)


def test_integer_volume_keeps_dtype_when_exact(tmp_path):
    vol = Volume(np.arange(8, dtype=np.int16).reshape(2, 2, 2) - 4, np.eye(4), "int16")
    write_nifti(vol, tmp_path / "i.nii")
    assert read_nifti(tmp_path / "i.nii").origin_dtype == "int16"
    frac = vol.with_data(vol.data + 0.5)
    write_nifti(frac, tmp_path / "f.nii")
    assert read_nifti(tmp_path / "f.nii").origin_dtype == "float32"


def _patch_header(raw, offset, fmt, *values):
    buf = bytearray(raw)
    struct.pack_into(fmt, buf, offset, *values)
    return bytes(buf)


def test_scaling_applied(tmp_path):
    raw = nifti_bytes(np.ones((2, 2, 2), np.float32), np.eye(4))
    (tmp_path / "s.nii").write_bytes(_patch_header(raw, 112, "<ff", 2.0, 3.0))
    assert np.all(read_nifti(tmp_path / "s.nii").data == 5.0)


def test_big_endian_header(tmp_path):
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    le = nifti_bytes(data, np.eye(4))
    be = bytearray(le)
    struct.pack_into(">i", be, 0, 348)
    struct.pack_into(">8h", be, 40, 3, 2, 2, 2, 1, 1, 1, 1)
    struct.pack_into(">hh", be, 70, 16, 32)
    struct.pack_into(">8f", be, 76, 1, 1, 1, 1, 1, 1, 1, 1)
    struct.pack_into(">f", be, 108, 352.0)
    struct.pack_into(">ff", be, 112, 1.0, 0.0)
    struct.pack_into(">hh", be, 252, 0, 0)
    be[352:] = data.ravel(order="F").astype(">f4").tobytes()
    (tmp_path / "be.nii").write_bytes(bytes(be))
    np.testing.assert_array_equal(read_nifti(tmp_path / "be.nii").data, data)


def test_qform_used_without_sform(tmp_path):
    raw = nifti_bytes(np.zeros((2, 2, 2), np.float32), np.eye(4))
    raw = _patch_header(raw, 252, "<hh", 1, 0)
    # 180 degrees about z: quaternion (b, c, d) = (0, 0, 1)
    raw = _patch_header(raw, 256, "<6f", 0.0, 0.0, 1.0, 5.0, 6.0, 7.0)
    (tmp_path / "q.nii").write_bytes(raw)
    aff = read_nifti(tmp_path / "q.nii").affine
    np.testing.assert_allclose(aff[:3, :3], np.diag([-1.0, -1.0, 1.0]), atol=1e-12)
    np.testing.assert_allclose(aff[:3, 3], [5, 6, 7])


def test_trailing_singleton_dims_squeezed(tmp_path):
    raw = nifti_bytes(np.zeros((2, 3, 4), np.float32), np.eye(4))
    raw = _patch_header(raw, 40, "<8h", 4, 2, 3, 4, 1, 1, 1, 1)
    (tmp_path / "t.nii").write_bytes(raw)
    assert read_nifti(tmp_path / "t.nii").dims == (2, 3, 4)


@pytest.mark.parametrize("offset,fmt,values,exc", [
    (0, "<i", (100,), MalformedHeader),
    (344, "<4s", (b"abcd",), MalformedHeader),
    (70, "<h", (1536,), UnsupportedDatatype),
    (40, "<8h", (4, 2, 3, 4, 5, 1, 1, 1), DimensionError),
    (40, "<8h", (2, 2, 3, 1, 1, 1, 1, 1), DimensionError),
])
def test_malformed_inputs(tmp_path, offset, fmt, values, exc):
    raw = nifti_bytes(np.zeros((2, 3, 4), np.float32), np.eye(4))
    (tmp_path / "x.nii").write_bytes(_patch_header(raw, offset, fmt, *values))
    with pytest.raises(exc):
        read_nifti(tmp_path / "x.nii")


def test_truncated_file(tmp_path):
    raw = nifti_bytes(np.zeros((4, 4, 4), np.float32), np.eye(4))
    (tmp_path / "x.nii").write_bytes(raw[:-10])
    with pytest.raises(MalformedHeader):
        read_nifti(tmp_path / "x.nii")
    (tmp_path / "y.nii").write_bytes(raw[:100])
    with pytest.raises(MalformedHeader):
        read_nifti(tmp_path / "y.nii")


def test_missing_file_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        read_nifti(tmp_path / "absent.nii")


def test_volume_validation():
    with pytest.raises(DimensionError):
        Volume(np.zeros((2, 2)), np.eye(4))
    with pytest.raises(DegenerateAffine):
        Volume(np.zeros((2, 2, 2)), np.diag([1.0, 0.0, 1.0, 1.0]))
    with pytest.raises(ValueError):
        BrainMask(np.full((2, 2, 2), 2, np.uint8))
    with pytest.raises(GridMismatch):
        check_same_grid(BrainMask(np.zeros((2, 2, 2))), BrainMask(np.zeros((2, 2, 3))))


def test_spacing_from_affine():
    v = Volume(np.zeros((2, 2, 2)), oblique_affine((1.2, 0.9, 2.0)))
    np.testing.assert_allclose(v.spacing, [1.2, 0.9, 2.0])


# --------------------------------------------------------------------------- orientation

def _random_orientation_affine(perm, signs, spacing=(1.0, 2.0, 3.0)):
    A = np.zeros((4, 4))
    A[3, 3] = 1
    for vox_axis, world_axis in enumerate(perm):
        A[world_axis, vox_axis] = signs[vox_axis] * spacing[vox_axis]
    A[:3, 3] = (10.0, -20.0, 5.0)
    return A


def test_reorient_las_flips_first_axis():
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    vol = Volume(data, _random_orientation_affine((0, 1, 2), (-1, 1, 1)))
    ras, rec = reorient_ras(vol)
    assert rec.flips == (True, False, False)
    np.testing.assert_array_equal(ras.data, data[::-1])
    assert np.all(np.diag(ras.affine)[:3] > 0)


@settings(max_examples=30, deadline=None)
@given(st.permutations([0, 1, 2]), st.tuples(*[st.sampled_from([-1, 1])] * 3))
def test_reorient_inverse_is_bit_exact(perm, signs):
    rng = np.random.default_rng(0)
    data = rng.normal(size=(3, 4, 5)).astype(np.float32)
    vol = Volume(data, _random_orientation_affine(perm, signs))
    ras, rec = reorient_ras(vol)
    assert np.all(np.argmax(np.abs(ras.affine[:3, :3]), axis=0) == [0, 1, 2])
    assert np.all(np.diag(ras.affine)[:3] > 0)
    back = apply_inverse(rec, ras)
    assert back.data.tobytes() == data.tobytes()
    assert back.affine.tobytes() == vol.affine.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.permutations([0, 1, 2]), st.tuples(*[st.sampled_from([-1, 1])] * 3))
def test_reorient_preserves_world_coordinates(perm, signs):
    data = np.arange(60, dtype=np.float32).reshape(3, 4, 5)
    vol = Volume(data, _random_orientation_affine(perm, signs))
    ras, _ = reorient_ras(vol)
    # the world position of each value is unchanged
    for idx in [(0, 0, 0), (2, 3, 4), (1, 2, 3)]:
        value = data[idx]
        world = vol.affine @ np.array([*idx, 1.0])
        new_idx = np.argwhere(ras.data == value)[0]
        np.testing.assert_allclose(ras.affine @ np.array([*new_idx, 1.0]), world, atol=1e-9)


def test_reorient_mask_stays_mask():
    m = BrainMask(np.eye(3, dtype=np.uint8)[:, :, None].repeat(2, 2),
                  _random_orientation_affine((2, 0, 1), (1, -1, 1)))
    ras, rec = reorient_ras(m)
    assert isinstance(ras, BrainMask)
    assert apply_inverse(rec, ras).data.tobytes() == m.data.tobytes()
