import numpy as np
import pytest

from conftest import oblique_affine
from voxelstrip import predictor, unet
from voxelstrip.errors import ConfigError, EmptyEnsemble, ZeroVariance
from voxelstrip.volume_io import BrainMask, Volume

SMALL = unet.NetConfig(depth=2, base_width=4)


def constant_model(p, cfg=SMALL):
    """Weights whose brain probability is ``p`` at every voxel."""
    ws = unet.build(cfg, 0)
    ws["head.w"] = np.zeros_like(ws["head.w"])
    ws["head.b"] = np.array([0.0, np.log(p / (1 - p))], dtype=ws["head.b"].dtype)
    return ws, cfg


@pytest.fixture(scope="module")
def model():
    return unet.build(SMALL, 3), SMALL


def test_mirror_set():
    assert len(predictor.ALL_MIRRORS) == 8 and len(set(predictor.ALL_MIRRORS)) == 8
    assert () in predictor.ALL_MIRRORS and (2, 3, 4) in predictor.ALL_MIRRORS


def test_identity_tta_equals_plain_forward(model, rng):
    ws, cfg = model
    x = rng.normal(size=(1, 1, 8, 8, 8)).astype(np.float32)
    a = predictor.tta_forward(ws, cfg, x, predictor.IDENTITY_ONLY)
    assert a.tobytes() == unet.predict(ws, cfg, x).tobytes()


def test_tta_output_is_mirror_symmetric_for_symmetric_input(model, rng):
    ws, cfg = model
    half = rng.normal(size=(4, 4, 4))
    full = np.concatenate([half, half[::-1]], 0)
    full = np.concatenate([full, full[:, ::-1]], 1)
    full = np.concatenate([full, full[:, :, ::-1]], 2)
    y = predictor.tta_forward(ws, cfg, full[None, None].astype(np.float32))
    for ax in (2, 3, 4):
        assert y.tobytes() == np.ascontiguousarray(np.flip(y, ax)).tobytes()


def test_tta_probabilities_sum_to_one(model, rng):
    ws, cfg = model
    y = predictor.tta_forward(ws, cfg, rng.normal(size=(1, 1, 8, 8, 8)).astype(np.float32))
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-5)


def test_ensemble_mean_of_constant_members():
    ens = predictor.Ensemble((constant_model(0.2), constant_model(0.6)))
    vol = Volume(np.random.default_rng(0).normal(size=(8, 8, 8)).astype(np.float32), np.eye(4))
    prob = predictor.ensemble_predict(ens, vol, tta=True)
    np.testing.assert_allclose(prob.data, 0.4, atol=1e-6)
    assert prob.dims == vol.dims and np.array_equal(prob.affine, vol.affine)


def test_ensemble_pads_and_crops_odd_grid(model):
    vol = Volume(np.random.default_rng(1).normal(size=(7, 9, 5)).astype(np.float32), np.eye(4))
    prob = predictor.ensemble_predict(predictor.Ensemble((model,)), vol, tta=False)
    assert prob.dims == (7, 9, 5) and np.all((prob.data >= 0) & (prob.data <= 1))


def test_ensemble_validation(model):
    with pytest.raises(EmptyEnsemble):
        predictor.Ensemble(())
    with pytest.raises(ConfigError):
        predictor.Ensemble((model,) * 6)
    other = unet.NetConfig(depth=2, base_width=8)
    with pytest.raises(ConfigError):
        predictor.Ensemble((model, (unet.build(other), other)))


def _bfs_components(m):
    seen = np.zeros_like(m, bool)
    comps = []
    offs = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1) if (a, b, c) != (0, 0, 0)]
    for start in zip(*np.nonzero(m)):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            v = stack.pop()
            comp.append(v)
            for o in offs:
                n = tuple(np.add(v, o))
                if all(0 <= n[i] < m.shape[i] for i in range(3)) and m[n] and not seen[n]:
                    seen[n] = True
                    stack.append(n)
        comps.append(comp)
    return comps


def test_largest_cc_matches_flood_fill(rng):
    for _ in range(20):
        m = rng.random((7, 6, 5)) < 0.25
        comps = _bfs_components(m)
        if not comps:
            continue
        size = max(map(len, comps))
        tied = [c for c in comps if len(c) == size]
        # tie rule: component holding the lowest x-fastest linear index
        best = min(tied, key=lambda c: min(np.ravel_multi_index(v, m.shape, order="F") for v in c))
        expect = np.zeros(m.shape, np.uint8)
        for v in best:
            expect[v] = 1
        np.testing.assert_array_equal(predictor.largest_cc(m), expect)


def test_largest_cc_tie_and_types():
    m = np.zeros((5, 5, 5), np.uint8)
    m[4, 0, 0] = 1     # F-order index 4
    m[0, 1, 0] = 1     # F-order index 5, but first in C order
    out = predictor.largest_cc(m)
    assert out[4, 0, 0] == 1 and out.sum() == 1
    bm = predictor.largest_cc(BrainMask(m, np.eye(4)))
    assert isinstance(bm, BrainMask) and bm.data.sum() == 1
    assert predictor.largest_cc(np.zeros((3, 3, 3))).sum() == 0


def test_largest_cc_diagonal_is_connected():
    m = np.zeros((4, 4, 4), np.uint8)
    for i in range(4):
        m[i, i, i] = 1
    assert predictor.largest_cc(m).sum() == 4


def test_extract_brain_output_grid_and_probability():
    A = oblique_affine()
    native = Volume(np.random.default_rng(2).normal(size=(12, 14, 9)).astype(np.float32), A)
    ens = predictor.Ensemble((constant_model(0.7),))
    res = predictor.extract_brain(native, ens, tta=False, with_probability=True)
    assert res.mask.data.shape == native.dims and np.allclose(res.mask.affine, A)
    assert res.mask.data.dtype == np.uint8 and res.mask.data.all()
    np.testing.assert_allclose(res.probability.data, 0.7, atol=1e-5)


def test_extract_brain_below_threshold_is_empty():
    native = Volume(np.random.default_rng(3).normal(size=(10, 10, 10)).astype(np.float32), np.eye(4))
    res = predictor.extract_brain(native, predictor.Ensemble((constant_model(0.3),)), tta=False)
    assert res.mask.data.sum() == 0 and res.probability is None


def test_extract_brain_rejects_constant_volume(model):
    flat = Volume(np.ones((8, 8, 8), np.float32), np.eye(4))
    with pytest.raises(ZeroVariance):
        predictor.extract_brain(flat, predictor.Ensemble((model,)))


def test_output_paths(tmp_path):
    m, p = predictor.output_paths("/data/sub01_T1.nii.gz", tmp_path)
    assert m == tmp_path / "sub01_T1_mask.nii.gz" and p == tmp_path / "sub01_T1_prob.nii.gz"
    assert predictor.output_paths("x.nii", tmp_path)[0].name == "x_mask.nii.gz"
