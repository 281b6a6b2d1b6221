import numpy as np
import pytest

from voxelstrip import phantom
from voxelstrip.errors import ConfigError
from voxelstrip.volume_io import read_nifti


@pytest.fixture(scope="module")
def sweep():
    cfg = phantom.PhantomConfig(contrast="mixed", lesions=(1, 3))
    return cfg, [phantom.generate_parts(cfg, i) for i in range(100)]


def test_determinism():
    cfg = phantom.PhantomConfig()
    a, b = phantom.generate(cfg, 7), phantom.generate(cfg, 7)
    assert a[0].data.tobytes() == b[0].data.tobytes() and a[1].data.tobytes() == b[1].data.tobytes()
    c = phantom.generate(cfg, 8)
    assert c[0].data.tobytes() != a[0].data.tobytes()
    d = phantom.generate(phantom.PhantomConfig(seed=1), 7)
    assert d[0].data.tobytes() != a[0].data.tobytes()


def test_ellipsoid_membership_analytic():
    pts = np.array([[0.0, 0, 0], [2, 0, 0], [2.01, 0, 0], [0, 3, 0], [0, 0, 4.5], [1.8, 1.5, 0]])
    inside = phantom.ellipsoid_inside(pts, np.zeros(3), np.eye(3), np.array([2.0, 3.0, 4.0]))
    assert inside.tolist() == [True, True, False, True, False, False]
    c, s = np.cos(np.pi / 2), np.sin(np.pi / 2)
    rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    assert phantom.ellipsoid_inside(np.array([[0.0, 2.0, 0]]), np.zeros(3), rz,
                                    np.array([2.0, 1.0, 1.0])).tolist() == [True]


def test_grid_and_types():
    cfg = phantom.PhantomConfig(dims=(48, 56, 52))
    vol, mask = phantom.generate(cfg, 0)
    assert vol.dims == (48, 56, 52) and vol.data.dtype == np.float32
    assert mask.data.dtype == np.uint8 and set(np.unique(mask.data)) <= {0, 1}
    assert np.allclose(vol.affine[:3, :3], np.eye(3) * 1.5) and np.array_equal(vol.affine, mask.affine)


def test_lesions_inside_mask(sweep):
    _, parts = sweep
    assert sum(p.lesions.any() for p in parts) > 50
    for p in parts:
        assert not (p.lesions & (p.mask.data == 0)).any()


def test_layers_disjoint(sweep):
    _, parts = sweep
    for p in parts[:20]:
        assert not (p.skull & (p.mask.data != 0)).any()


def test_brain_background_separation(sweep):
    cfg, parts = sweep
    for p in parts:
        x, brain = p.volume.data, p.mask.data != 0
        outside = ~brain & ~p.skull
        assert abs(x[brain].mean() - x[outside].mean()) > 3 * cfg.noise_sigma


def test_volume_fraction(sweep):
    _, parts = sweep
    fr = [p.mask.data.mean() for p in parts]
    assert 0.05 <= min(fr) and max(fr) <= 0.60


def test_mixed_contrast_uses_both(sweep):
    _, parts = sweep
    assert {p.contrast for p in parts} == {"t1", "t2"}


def test_symmetric_preset_is_mirror_exact():
    cfg = phantom.PhantomConfig(symmetric=True, dims=(48, 49, 48))
    vol, mask = phantom.generate(cfg, 3)
    for ax in range(3):
        assert np.array_equal(vol.data, np.flip(vol.data, ax))
        assert np.array_equal(mask.data, np.flip(mask.data, ax))


def test_generate_set_round_trip(tmp_path):
    cfg = phantom.PhantomConfig()
    written = phantom.generate_set(cfg, 2, tmp_path, start=5)
    assert [p.name for p, _ in written] == ["case_0005.nii.gz", "case_0006.nii.gz"]
    vol, mask = phantom.generate(cfg, 6)
    back = read_nifti(tmp_path / "case_0006.nii.gz")
    assert back.data.tobytes() == vol.data.tobytes() and np.array_equal(back.affine, vol.affine)
    assert np.array_equal(read_nifti(tmp_path / "case_0006_mask.nii.gz").data, mask.data)


@pytest.mark.parametrize("kw", [dict(dims=(4, 48, 48)), dict(contrast="pd"), dict(csf_mm=(3, 1)),
                                dict(semi_axes=(0.3, 0.45)), dict(noise_sigma=-0.1)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        phantom.PhantomConfig(**kw)
