"""Stochastic training augmentation for (image patch, mask patch) pairs.

Stages run in a fixed order: mirror, spatial (rotation, scaling, elastic),
gamma, additive noise, blur, renormalization. All randomness for one sample
comes from a single seed, and every random quantity is drawn up front in
:func:`draw_plan`, so the result is a pure function of (input, config, seed).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError


@dataclass(frozen=True)
class AugmentConfig:
    p_mirror: float = 0.5          # per axis
    p_spatial: float = 0.5
    scale_range: tuple = (0.75, 1.25)
    rot_range_deg: tuple = (-180.0, 180.0)
    elastic_sigma: tuple = (9.0, 13.0)
    elastic_alpha: tuple = (0.0, 900.0)
    p_gamma: float = 0.5
    gamma_range: tuple = (0.8, 1.5)
    p_noise: float = 0.3
    noise_sigma: float = 0.2
    p_blur: float = 0.3
    blur_sigma: tuple = (0.2, 1.5)
    per_axis_scale: bool = False

    def __post_init__(self):
        for name in ("p_mirror", "p_spatial", "p_gamma", "p_noise", "p_blur"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name}={p} is not a probability")
        for name in ("scale_range", "rot_range_deg", "elastic_sigma", "elastic_alpha",
                     "gamma_range", "blur_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: low {lo} > high {hi}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    @classmethod
    def disabled(cls, **kw):
        """All stages off: the pipeline only renormalizes."""
        base = dict(p_mirror=0.0, p_spatial=0.0, p_gamma=0.0, p_noise=0.0, p_blur=0.0)
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class AugmentPlan:
    flips: tuple
    spatial: bool
    scale: tuple
    angles: tuple                # radians, about axes 0, 1, 2
    elastic_sigma: float
    elastic_alpha: float
    elastic_seed: int
    gamma: bool
    gamma_value: float
    noise: bool
    noise_seed: int
    blur: bool
    blur_sigma: float


def sample_seed(global_seed: int, epoch: int, index: int) -> int:
    """Per-sample 64-bit seed derived from (global seed, epoch, sample index)."""
    ss = np.random.SeedSequence([int(global_seed), int(epoch), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def draw_plan(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentPlan:
    """Draw every random decision for one sample. The number of draws is fixed."""
    flips = tuple(bool(u < cfg.p_mirror) for u in rng.random(3))
    spatial = bool(rng.random() < cfg.p_spatial)
    scales = rng.uniform(*cfg.scale_range, size=3)
    scale = tuple(float(s) for s in scales) if cfg.per_axis_scale else (float(scales[0]),) * 3
    angles = tuple(float(a) for a in np.deg2rad(rng.uniform(*cfg.rot_range_deg, size=3)))
    e_sigma = float(rng.uniform(*cfg.elastic_sigma))
    e_alpha = float(rng.uniform(*cfg.elastic_alpha))
    e_seed = int(rng.integers(0, 2 ** 63))
    gamma = bool(rng.random() < cfg.p_gamma)
    gamma_value = float(rng.uniform(*cfg.gamma_range))
    noise = bool(rng.random() < cfg.p_noise)
    noise_seed = int(rng.integers(0, 2 ** 63))
    blur = bool(rng.random() < cfg.p_blur)
    blur_sigma = float(rng.uniform(*cfg.blur_sigma))
    return AugmentPlan(flips, spatial, scale, angles, e_sigma, e_alpha, e_seed,
                       gamma, gamma_value, noise, noise_seed, blur, blur_sigma)


# --------------------------------------------------------------------------- stages

def mirror(image, mask, flips):
    axes = tuple(ax for ax, f in enumerate(flips) if f)
    if not axes:
        return image, mask
    return (np.ascontiguousarray(np.flip(image, axes)),
            np.ascontiguousarray(np.flip(mask, axes)))


def rotation_matrix(angles):
    ax, ay, az = angles
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    # rotation in the plane of axes 0 and 1
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def gaussian_kernel1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(arr, sigma, mode="nearest"):
    """Separable Gaussian filter truncated at 4 sigma."""
    k = gaussian_kernel1d(sigma)
    out = np.asarray(arr, dtype=np.float64)
    for ax in range(out.ndim):
        out = ndimage.correlate1d(out, k, axis=ax, mode=mode)
    return out


def elastic_field(shape, sigma, alpha, seed):
    """Displacement field (3, *shape): smoothed N(0, 1) vectors scaled by ``alpha``."""
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((3,) + tuple(shape))
    return np.stack([gaussian_smooth(raw[i], sigma, mode="constant") * alpha for i in range(3)])


def spatial_transform(image, mask, scale=(1.0, 1.0, 1.0), angles=(0.0, 0.0, 0.0),
                      elastic_sigma=10.0, elastic_alpha=0.0, elastic_seed=0):
    """Rotate, then scale, about the patch centre, plus elastic displacement.

    The image is resampled with cubic B-splines and the mask with nearest
    neighbour; samples outside the patch read as 0.
    """
    shape = image.shape
    center = (np.asarray(shape, dtype=np.float64) - 1) / 2
    grid = np.indices(shape, dtype=np.float64) - center.reshape(3, 1, 1, 1)
    if elastic_alpha > 0:
        grid += elastic_field(shape, elastic_sigma, elastic_alpha, elastic_seed)
    R = rotation_matrix(angles)
    coords = np.einsum("ij,j...->i...", R, grid)
    coords *= np.asarray(scale, dtype=np.float64).reshape(3, 1, 1, 1)
    coords += center.reshape(3, 1, 1, 1)
    # trig round-off would push exact edge samples just outside the patch
    near = np.rint(coords)
    snap = np.abs(coords - near) < 1e-9
    coords[snap] = near[snap]
    img = ndimage.map_coordinates(image.astype(np.float64), coords, order=3,
                                  mode="constant", cval=0.0, prefilter=True)
    msk = ndimage.map_coordinates(mask.astype(np.float64), coords, order=0,
                                  mode="constant", cval=0.0)
    return img.astype(np.float32), (msk > 0.5).astype(np.uint8)


def gamma_augment(image, gamma):
    """Map intensities to [0, 1], raise to ``gamma``, map back. Flat patches pass through."""
    x = image.astype(np.float64)
    lo, hi = x.min(), x.max()
    span = hi - lo
    if not span > 0:
        return image
    y = ((x - lo) / span) ** gamma
    return (y * span + lo).astype(np.float32)


def gaussian_noise(image, sigma, seed):
    rng = np.random.default_rng(seed)
    return (image + rng.normal(0.0, sigma, size=image.shape)).astype(np.float32)


def gaussian_blur(image, sigma):
    return gaussian_smooth(image, sigma, mode="nearest").astype(np.float32)


def renormalize(image):
    """Zero mean, unit variance; a flat patch becomes all zeros."""
    x = image.astype(np.float64)
    std = x.std()
    if not std > 1e-8:
        return np.zeros_like(image, dtype=np.float32)
    return ((x - x.mean()) / std).astype(np.float32)


# --------------------------------------------------------------------------- pipeline

def apply_plan(image, mask, plan: AugmentPlan, noise_sigma=0.2):
    image, mask = mirror(image, mask, plan.flips)
    if plan.spatial:
        image, mask = spatial_transform(image, mask, plan.scale, plan.angles,
                                        plan.elastic_sigma, plan.elastic_alpha, plan.elastic_seed)
    if plan.gamma:
        image = gamma_augment(image, plan.gamma_value)
    if plan.noise:
        image = gaussian_noise(image, noise_sigma, plan.noise_seed)
    if plan.blur:
        image = gaussian_blur(image, plan.blur_sigma)
    return renormalize(image), mask


def augment_pipeline(image, mask, cfg: AugmentConfig, seed: int):
    """Augment one (image, mask) patch pair; deterministic given ``seed``."""
    plan = draw_plan(cfg, np.random.default_rng(seed))
    return apply_plan(np.asarray(image, dtype=np.float32), np.asarray(mask, dtype=np.uint8),
                      plan, cfg.noise_sigma)
