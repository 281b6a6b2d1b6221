import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelstrip.errors import ConfigError, ZeroVariance
from voxelstrip.resample_norm import (GridSpec, mask_to_native, probability_to_native, resample,
                                      resample_mask, target_grid, zscore)
from voxelstrip.volume_io import BrainMask, Volume

from conftest import oblique_affine


def test_output_dims_rounding():
    vol = Volume(np.zeros((10, 7, 3)), np.diag([1.0, 2.0, 3.3, 1.0]))
    dims, _, _ = target_grid(vol, (1.5, 1.5, 1.5))
    # 10/1.5 = 6.67 -> 7, 14/1.5 = 9.33 -> 9, 9.9/1.5 = 6.6 -> 7
    assert dims == (7, 9, 7)
    tiny = Volume(np.zeros((1, 1, 1)), np.eye(4) * 0.1 + np.diag([0, 0, 0, 0.9]))
    assert target_grid(tiny, (1.5, 1.5, 1.5))[0] == (1, 1, 1)


def test_constant_volume_stays_constant(backend):
    vol = Volume(np.full((9, 8, 5), 3.0), oblique_affine())
    out = resample(vol)
    assert np.all(out.data == np.float32(3.0))


def test_identity_at_network_spacing(backend, rng):
    data = rng.normal(size=(8, 6, 7)).astype(np.float32)
    vol = Volume(data, oblique_affine((1.5, 1.5, 1.5)))
    out = resample(vol)
    assert out.dims == vol.dims
    np.testing.assert_allclose(out.data, data, atol=1e-6)
    np.testing.assert_allclose(out.affine, vol.affine, atol=1e-9)


def test_ramp_1mm_to_1p5mm(backend):
    n = 30
    data = np.broadcast_to(np.arange(n, dtype=np.float32)[:, None, None], (n, 3, 3)).copy()
    vol = Volume(data, np.eye(4))
    out = resample(vol, GridSpec((1.5, 1.0, 1.0)))
    assert out.dims == (20, 3, 3)
    # new centres sit at index (n-1)/2 + (i - 9.5) * 1.5
    expected = (n - 1) / 2 + (np.arange(20) - 9.5) * 1.5
    np.testing.assert_allclose(out.data[:, 1, 1], expected, atol=1e-5)


def test_world_position_of_centres_is_preserved():
    vol = Volume(np.zeros((10, 12, 8)), oblique_affine((1.0, 0.8, 2.0)))
    dims, aff, _ = target_grid(vol, (1.5, 1.5, 1.5))
    c_in = vol.affine @ np.array([*(np.array(vol.dims) - 1) / 2, 1])
    c_out = aff @ np.array([*(np.array(dims) - 1) / 2, 1])
    np.testing.assert_allclose(c_in, c_out, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(aff[:3, :3], axis=0), 1.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.tuples(*[st.floats(0.6, 3.0)] * 3))
def test_trilinear_output_within_input_bounds(seed, spacing):
    data = np.random.default_rng(seed).normal(size=(6, 5, 7)).astype(np.float32)
    out = resample(Volume(data, np.diag([*spacing, 1.0])))
    assert out.data.min() >= data.min() - 1e-6 and out.data.max() <= data.max() + 1e-6


def test_nearest_mask_resampling_stays_binary(rng):
    m = BrainMask((rng.random((11, 9, 7)) < 0.4).astype(np.uint8), oblique_affine())
    out = resample_mask(m)
    assert out.data.dtype == np.uint8 and set(np.unique(out.data)) <= {0, 1}


def _blob_round_trip_error(n, sigma):
    idx = np.indices((n, n, n), dtype=np.float64)
    r2 = sum((c - (n - 1) / 2) ** 2 for c in idx)
    blob = np.exp(-r2 / (2 * sigma ** 2))  # 1 mm voxels
    native = Volume(blob, np.eye(4))
    back = probability_to_native(resample(native), native)
    return float(np.abs(back - blob.astype(np.float32)).max())


@pytest.mark.parametrize("sigma", [5.0, 6.0])
def test_gaussian_blob_round_trip(sigma):
    assert _blob_round_trip_error(40, sigma) < 0.05


def test_gaussian_blob_round_trip_narrow_blob_frozen():
    # two linear interpolation stages lose ~3 h^2 / (8 sigma^2) at the peak,
    # so narrower blobs exceed 5% of the peak
    assert _blob_round_trip_error(40, 3.0) == pytest.approx(0.0974, abs=5e-4)


def test_zscore_hand_values():
    vol = Volume(np.array([0, 0, 4, 4], np.float32).reshape(2, 2, 1), np.eye(4))
    assert zscore(vol).data.ravel().tolist() == [-1, -1, 1, 1]


def test_zscore_statistics_and_errors(rng):
    vol = Volume(rng.normal(5, 3, size=(10, 10, 10)), np.eye(4))
    z = zscore(vol).data.astype(np.float64)
    assert abs(z.mean()) < 1e-6 and abs(z.std() - 1) < 1e-6
    np.testing.assert_allclose(zscore(zscore(vol)).data, zscore(vol).data, atol=1e-6)
    with pytest.raises(ZeroVariance):
        zscore(Volume(np.ones((3, 3, 3)), np.eye(4)))
    with pytest.raises(ConfigError):
        zscore(vol, mode="brain")


def test_zscore_nonzero_mode():
    data = np.zeros((2, 2, 2), np.float32)
    data[0, 0, :] = [2, 4]
    z = zscore(Volume(data, np.eye(4)), mode="nonzero").data
    assert z[0, 0].tolist() == [-1, 1]


def test_mask_to_native_thresholds():
    native = Volume(np.zeros((6, 6, 6)), np.diag([1.5, 1.5, 1.5, 1]))
    ones = mask_to_native(Volume(np.ones((6, 6, 6)), native.affine), native)
    assert ones.data.all()
    low = mask_to_native(Volume(np.full((6, 6, 6), 0.49), native.affine), native)
    assert not low.data.any()
    blocks = np.where(np.indices((6, 6, 6))[0] < 3, 0.2, 0.8).astype(np.float32)
    m = mask_to_native(Volume(blocks, native.affine), native)
    np.testing.assert_array_equal(m.data, (blocks >= 0.5).astype(np.uint8))


def test_gridspec_validation():
    with pytest.raises(ConfigError):
        GridSpec((1.5, 0.0, 1.5))
    with pytest.raises(ConfigError):
        GridSpec(interp="cubic")
