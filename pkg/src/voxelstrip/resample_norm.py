"""Resampling to the network grid, z-scoring, and mapping probabilities back."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ZeroVariance
from .volume_io import BrainMask, Volume

NETWORK_SPACING = (1.5, 1.5, 1.5)


@dataclass(frozen=True)
class GridSpec:
    target_spacing: tuple = NETWORK_SPACING
    interp: str = "trilinear"

    def __post_init__(self):
        if len(self.target_spacing) != 3 or min(self.target_spacing) <= 0:
            raise ConfigError(f"target spacing must be 3 positive values, got {self.target_spacing}")
        if self.interp not in ("trilinear", "nearest"):
            raise ConfigError(f"unknown interpolation {self.interp!r}")


def _snap(M, tol=1e-9):
    # keeps identity-like index maps exact after matrix inversion round-off
    r = np.round(M)
    return np.where(np.abs(M - r) < tol, r, M)


def target_grid(vol, target_spacing):
    """Output dims and affine for resampling ``vol`` to ``target_spacing``.

    The field-of-view centre is preserved; axis directions are unchanged.
    Returns ``(dims, affine, index_map)`` where ``index_map`` is the 3x4
    matrix taking output indices to (continuous) input indices.
    """
    dims_in = np.array(vol.dims, dtype=np.float64)
    spacing = vol.spacing
    target = np.asarray(target_spacing, dtype=np.float64)
    dims_out = np.maximum(1, np.floor(dims_in * spacing / target + 0.5)).astype(int)
    scale = target / spacing
    offset = (dims_in - 1) / 2 - (dims_out - 1) / 2 * scale
    index_map = np.zeros((4, 4))
    index_map[:3, :3] = np.diag(scale)
    index_map[:3, 3] = offset
    index_map[3, 3] = 1.0
    index_map = _snap(index_map)
    affine = vol.affine @ index_map
    return tuple(int(d) for d in dims_out), affine, index_map[:3]


def sample(src, index_map, out_dims, interp="trilinear"):
    fn = kernels.trilinear_affine if interp == "trilinear" else kernels.nearest_affine
    return fn(np.ascontiguousarray(src), index_map, out_dims)


def resample(vol: Volume, spec: GridSpec = GridSpec()) -> Volume:
    """Resample a volume onto an isotropic grid of ``spec.target_spacing``."""
    dims, affine, index_map = target_grid(vol, spec.target_spacing)
    if spec.interp == "nearest":
        data = sample(vol.data, index_map, dims, "nearest")
    else:
        data = sample(vol.data.astype(np.float64), index_map, dims, "trilinear")
    return Volume(data.astype(np.float32), affine, vol.origin_dtype)


def resample_mask(mask: BrainMask, target_spacing=NETWORK_SPACING) -> BrainMask:
    """Nearest-neighbour resampling of a binary mask (stays binary)."""
    dims, affine, index_map = target_grid(mask, target_spacing)
    data = sample(mask.data.astype(np.float32), index_map, dims, "nearest")
    return BrainMask(data.astype(np.uint8), affine)


def zscore(vol: Volume, mode: str = "all") -> Volume:
    """Standardize intensities to zero mean and unit population std.

    ``mode="all"`` uses every voxel for the statistics; ``mode="nonzero"``
    uses only nonzero voxels (the transform is still applied everywhere).
    """
    x = vol.data.astype(np.float64)
    if mode == "all":
        ref = x
    elif mode == "nonzero":
        ref = x[x != 0]
        if ref.size == 0:
            raise ZeroVariance("volume has no nonzero voxels")
    else:
        raise ConfigError(f"unknown z-score mode {mode!r}")
    mean = ref.mean()
    std = ref.std()
    if not std > 1e-8:
        raise ZeroVariance(f"intensity std {std:g} too small to z-score")
    return vol.with_data(((x - mean) / std).astype(np.float32), "float32")


def probability_to_native(prob: Volume, native) -> np.ndarray:
    """Trilinearly resample a probability map onto ``native``'s grid."""
    index_map = _snap(np.linalg.inv(prob.affine) @ native.affine)[:3]
    return sample(prob.data.astype(np.float64), index_map, native.dims, "trilinear")


def mask_to_native(prob: Volume, native) -> BrainMask:
    """Upsample probabilities to the native grid and binarize at ``p >= 0.5``."""
    p = probability_to_native(prob, native)
    return BrainMask((p >= 0.5).astype(np.uint8), native.affine.copy())
