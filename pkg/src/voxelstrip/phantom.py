"""Seeded synthetic head phantoms with analytically known brain masks.

A phantom is a rotated, jittered brain ellipsoid wrapped in a CSF layer and
a bright skull shell, optionally with spherical lesions inside the brain,
plus Gaussian noise. The brain ellipsoid is the ground-truth mask.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .volume_io import BrainMask, Volume, write_nifti

# (background, skull, csf, brain)
T1_LEVELS = (0.05, 1.0, 0.25, 0.6)
T2_LEVELS = (0.05, 0.45, 0.95, 0.35)


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (48, 48, 48)
    spacing: float = 1.5
    semi_axes: tuple = (0.24, 0.33)      # fractions of the field of view
    csf_mm: tuple = (1.5, 3.0)
    skull_mm: tuple = (3.0, 6.0)
    contrast: str = "t1"                 # t1, t2 or mixed
    level_jitter: float = 0.05           # relative, per tissue and case
    lesions: tuple = (0, 3)
    lesion_radius_mm: tuple = (3.0, 7.0)
    lesion_contrast: tuple = (-0.3, 0.3)
    noise_sigma: float = 0.04
    center_jitter_mm: float = 3.0
    rotation_deg: float = 15.0
    symmetric: bool = False
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ConfigError(f"dims must be three ints >= 8, got {self.dims}")
        if self.spacing <= 0:
            raise ConfigError("spacing must be positive")
        if self.contrast not in ("t1", "t2", "mixed"):
            raise ConfigError(f"unknown contrast {self.contrast!r}")
        for name in ("semi_axes", "csf_mm", "skull_mm", "lesions", "lesion_radius_mm",
                     "lesion_contrast"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: low {lo} > high {hi}")
        if self.semi_axes[0] <= 0 or self.noise_sigma < 0 or self.lesions[0] < 0:
            raise ConfigError("semi_axes, noise_sigma and lesion counts must be positive")
        half_fov = min(self.dims) * self.spacing / 2
        reach = (self.semi_axes[1] * min(self.dims) * self.spacing + self.csf_mm[1]
                 + self.skull_mm[1] + self.center_jitter_mm)
        if reach > half_fov:
            raise ConfigError(f"head reaches {reach:.1f} mm, field of view half-width is "
                              f"{half_fov:.1f} mm")


@dataclass(frozen=True)
class PhantomParts:
    volume: Volume
    mask: BrainMask
    lesions: np.ndarray      # bool, subset of the mask
    skull: np.ndarray        # bool
    contrast: str


def _affine(cfg):
    A = np.diag([cfg.spacing] * 3 + [1.0])
    A[:3, 3] = -(np.asarray(cfg.dims) - 1) / 2 * cfg.spacing
    return A


def _rotation(rng, max_deg):
    a = np.deg2rad(rng.uniform(-max_deg, max_deg, size=3))
    c, s = np.cos(a), np.sin(a)
    rx = np.array([[1, 0, 0], [0, c[0], -s[0]], [0, s[0], c[0]]])
    ry = np.array([[c[1], 0, s[1]], [0, 1, 0], [-s[1], 0, c[1]]])
    rz = np.array([[c[2], -s[2], 0], [s[2], c[2], 0], [0, 0, 1]])
    return rz @ ry @ rx


def ellipsoid_inside(points, center, rotation, semi_axes):
    """Membership of mm ``points`` (..., 3) in a rotated ellipsoid (boundary counts as inside)."""
    local = (points - center) @ rotation
    return ((local / semi_axes) ** 2).sum(axis=-1) <= 1.0


def _symmetric_noise(rng, dims, sigma):
    half = tuple((d + 1) // 2 for d in dims)
    n = rng.normal(0.0, sigma, size=half)
    for ax, d in enumerate(dims):
        mirrored = np.flip(n, ax)
        if d % 2:
            mirrored = np.delete(mirrored, 0, axis=ax)
        n = np.concatenate([n, mirrored], axis=ax)
    return n


def generate_parts(cfg: PhantomConfig, index: int) -> PhantomParts:
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(index)]))
    dims = tuple(int(d) for d in cfg.dims)
    fov = min(dims) * cfg.spacing
    # draw everything up front so the symmetric preset consumes the same stream
    semi = rng.uniform(*cfg.semi_axes, size=3) * fov
    csf = rng.uniform(*cfg.csf_mm)
    skull = rng.uniform(*cfg.skull_mm)
    jitter = rng.uniform(-1, 1, size=3) * cfg.center_jitter_mm / np.sqrt(3)
    rot = _rotation(rng, cfg.rotation_deg)
    contrast = cfg.contrast
    if contrast == "mixed":
        contrast = "t1" if rng.random() < 0.5 else "t2"
    base = np.array(T1_LEVELS if contrast == "t1" else T2_LEVELS)
    levels = base * (1 + rng.uniform(-cfg.level_jitter, cfg.level_jitter, size=4))
    n_les = int(rng.integers(cfg.lesions[0], cfg.lesions[1] + 1))
    if cfg.symmetric:
        jitter = np.zeros(3)
        rot = np.eye(3)
        n_les = 0

    idx = np.indices(dims, dtype=np.float64).transpose(1, 2, 3, 0)
    center = (np.asarray(dims) - 1) / 2 * cfg.spacing + jitter
    pts = idx * cfg.spacing
    brain = ellipsoid_inside(pts, center, rot, semi)
    inner = ellipsoid_inside(pts, center, rot, semi + csf)
    outer = ellipsoid_inside(pts, center, rot, semi + csf + skull)
    csf_layer = inner & ~brain
    skull_shell = outer & ~inner

    img = np.full(dims, levels[0])
    img[skull_shell] = levels[1]
    img[csf_layer] = levels[2]
    img[brain] = levels[3]

    lesion = np.zeros(dims, dtype=bool)
    for _ in range(n_les):
        u = rng.normal(size=3)
        u *= rng.uniform() ** (1 / 3) * 0.6 / np.linalg.norm(u)
        c = center + rot @ (u * semi)
        r = rng.uniform(*cfg.lesion_radius_mm)
        delta = rng.uniform(*cfg.lesion_contrast)
        sphere = (((pts - c) ** 2).sum(axis=-1) <= r * r) & brain
        img[sphere] += delta
        lesion |= sphere

    if cfg.symmetric:
        img += _symmetric_noise(rng, dims, cfg.noise_sigma)
    else:
        img += rng.normal(0.0, cfg.noise_sigma, size=dims)

    affine = _affine(cfg)
    vol = Volume(img.astype(np.float32), affine.copy())
    mask = BrainMask(brain.astype(np.uint8), affine.copy())
    return PhantomParts(vol, mask, lesion, skull_shell, contrast)


def generate(cfg: PhantomConfig, index: int):
    """Return ``(Volume, BrainMask)`` for phantom ``index``; deterministic per (seed, index)."""
    parts = generate_parts(cfg, index)
    return parts.volume, parts.mask


def case_name(index: int) -> str:
    return f"case_{index:04d}"


def generate_set(cfg: PhantomConfig, n: int, out_dir, start: int = 0):
    """Write ``n`` phantom pairs as ``case_%04d.nii.gz`` / ``case_%04d_mask.nii.gz``."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(start, start + n):
        vol, mask = generate(cfg, i)
        vpath = out / f"{case_name(i)}.nii.gz"
        mpath = out / f"{case_name(i)}_mask.nii.gz"
        write_nifti(vol, vpath)
        write_nifti(mask, mpath)
        written.append((vpath, mpath))
    return written
