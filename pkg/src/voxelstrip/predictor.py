"""Inference: preprocessing, mirror TTA, ensembling and connected-component cleanup."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels, unet
from .errors import ConfigError, EmptyEnsemble
from .resample_norm import GridSpec, NETWORK_SPACING, probability_to_native, resample, zscore
from .volume_io import BrainMask, Volume, apply_inverse, reorient_ras

ALL_MIRRORS = tuple(tuple(ax for ax, f in zip((2, 3, 4), flags) if f)
                    for flags in itertools.product((False, True), repeat=3))
IDENTITY_ONLY = ((),)


@dataclass(frozen=True)
class Ensemble:
    members: tuple    # of (WeightStore, NetConfig)

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise EmptyEnsemble("an ensemble needs at least one model")
        if len(members) > 5:
            raise ConfigError(f"at most 5 ensemble members, got {len(members)}")
        cfg0 = members[0][1]
        if any(cfg != cfg0 for _, cfg in members):
            raise ConfigError("all ensemble members must share one NetConfig")
        object.__setattr__(self, "members", members)

    @property
    def config(self) -> unet.NetConfig:
        return self.members[0][1]

    @classmethod
    def load(cls, paths):
        return cls(tuple(unet.load_model(p) for p in paths))


def tta_forward(weights, cfg: unet.NetConfig, x: np.ndarray, mirrors=ALL_MIRRORS) -> np.ndarray:
    """Softmax averaged over mirrored copies of ``x`` (N, 1, D, H, W).

    Each copy is mirrored, forwarded and un-mirrored. The per-voxel values are
    sorted before summation, so a mirror-symmetric input gives an exactly
    symmetric output. A single identity mirror returns the plain forward pass.
    """
    mirrors = tuple(tuple(m) for m in mirrors)
    if mirrors == IDENTITY_ONLY:
        return unet.predict(weights, cfg, x)
    outs = []
    for axes in mirrors:
        xi = np.ascontiguousarray(np.flip(x, axes)) if axes else x
        y = unet.predict(weights, cfg, xi)
        outs.append(np.flip(y, axes) if axes else y)
    stack = np.sort(np.stack(outs).astype(np.float64), axis=0)
    return (stack.sum(axis=0) / len(outs)).astype(np.float32)


def _pad_amounts(dims, divisor):
    pads = []
    for d in dims:
        extra = (-d) % divisor
        pads.append((extra // 2, extra - extra // 2))
    return pads


def ensemble_predict(ens: Ensemble, vol: Volume, tta: bool = True) -> Volume:
    """Mean member softmax (brain channel) on ``vol``'s grid.

    The input is edge-padded to the network divisor and the padding is
    cropped from the result.
    """
    if not isinstance(ens, Ensemble):
        ens = Ensemble(tuple(ens))
    cfg = ens.config
    pads = _pad_amounts(vol.dims, cfg.divisor)
    x = np.pad(vol.data, pads, mode="edge")[None, None].astype(np.float32)
    mirrors = ALL_MIRRORS if tta else IDENTITY_ONLY
    acc = None
    for weights, _ in ens.members:
        y = tta_forward(weights, cfg, x, mirrors)[0, 1].astype(np.float64)
        acc = y if acc is None else acc + y
    prob = (acc / len(ens.members)).astype(np.float32)
    crop = tuple(slice(lo, lo + d) for (lo, _), d in zip(pads, vol.dims))
    return Volume(np.ascontiguousarray(prob[crop]), vol.affine.copy())


def largest_cc(mask):
    """Keep the largest 26-connected component.

    Ties go to the component holding the lowest linear voxel index (x fastest,
    as stored on disk). Accepts a BrainMask or an array; returns the same kind.
    """
    data = np.asarray(getattr(mask, "data", mask)) != 0
    labels, n = kernels.label26(data.astype(np.uint8))
    if n <= 1:
        out = data.astype(np.uint8)
    else:
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        sizes[0] = 0
        best = np.flatnonzero(sizes == sizes.max())
        if len(best) > 1:
            lab_f = labels.ravel(order="F")
            uniq, first = np.unique(lab_f, return_index=True)
            first_of = dict(zip(uniq.tolist(), first.tolist()))
            best = [min(best, key=lambda lab: first_of[int(lab)])]
        out = (labels == best[0]).astype(np.uint8)
    if isinstance(mask, BrainMask):
        return BrainMask(out, mask.affine.copy())
    return out


@dataclass(frozen=True)
class Extraction:
    mask: BrainMask
    probability: Volume | None = None


def extract_brain(native: Volume, ens: Ensemble, tta: bool = True,
                  with_probability: bool = False) -> Extraction:
    """Brain mask on ``native``'s exact grid.

    Steps: RAS reorientation, 1.5 mm trilinear resampling, z-scoring,
    ensemble prediction, trilinear upsampling of the probabilities,
    threshold at 0.5, largest component, inverse reorientation.
    """
    ras, record = reorient_ras(native)
    net_vol = zscore(resample(ras, GridSpec(NETWORK_SPACING, "trilinear")))
    prob = ensemble_predict(ens, net_vol, tta)
    p_native = probability_to_native(prob, ras).astype(np.float32)
    mask = largest_cc(BrainMask((p_native >= 0.5).astype(np.uint8), ras.affine.copy()))
    mask = apply_inverse(record, mask)
    out_prob = None
    if with_probability:
        out_prob = apply_inverse(record, Volume(p_native, ras.affine.copy()))
    return Extraction(mask, out_prob)


def output_paths(input_path, out_dir):
    """``<stem>_mask.nii.gz`` and ``<stem>_prob.nii.gz`` inside ``out_dir``."""
    name = Path(input_path).name
    for ext in (".nii.gz", ".nii", ".img", ".hdr"):
        if name.endswith(ext):
            name = name[: -len(ext)]
            break
    out = Path(out_dir)
    return out / f"{name}_mask.nii.gz", out / f"{name}_prob.nii.gz"
