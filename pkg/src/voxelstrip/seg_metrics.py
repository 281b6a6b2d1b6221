"""Mask comparison metrics: DICE in percent and the 95th-percentile Hausdorff distance."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import EmptyMask, GridMismatch, NoMatchingCases, VoxelstripError
from .nonparam_stats import median_iqr
from .volume_io import BrainMask, check_same_grid, read_nifti

SEQUENCES = ("T1w", "cT1w", "FLAIR", "T2w", "other")
_FACES = ndimage.generate_binary_structure(3, 1)


def _arrays(gt, pm):
    if isinstance(gt, BrainMask) and isinstance(pm, BrainMask):
        check_same_grid(gt, pm)
        return gt.data != 0, pm.data != 0
    a, b = np.asarray(getattr(gt, "data", gt)) != 0, np.asarray(getattr(pm, "data", pm)) != 0
    if a.shape != b.shape:
        raise GridMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(gt, pm) -> float:
    """2|GT & PM| / (|GT| + |PM|) * 100; two empty masks score 100."""
    a, b = _arrays(gt, pm)
    inter = int(np.count_nonzero(a & b))
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return 100.0
    return 200.0 * inter / total


def surface_voxels(mask) -> np.ndarray:
    """Foreground voxels with a face neighbour that is background or outside the grid."""
    m = np.asarray(getattr(mask, "data", mask)) != 0
    if not m.any():
        return np.zeros_like(m)
    return m & ~ndimage.binary_erosion(m, structure=_FACES, border_value=0)


def directed_distances(a, b, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Sorted mm distances from each surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(surface_voxels(a)) * sp
    pb = np.argwhere(surface_voxels(b)) * sp
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyMask("surface distance needs two nonempty masks")
    d, _ = cKDTree(pb).query(pa)
    return np.sort(d)


def hd95(gt, pm, spacing=None) -> float:
    """Max of the two directed 95th-percentile surface distances, in mm.

    ``spacing`` defaults to the mask voxel size when BrainMasks are given.
    """
    a, b = _arrays(gt, pm)
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, BrainMask) else (1.0, 1.0, 1.0)
    if not a.any() or not b.any():
        raise EmptyMask("hd95 is undefined when either mask is empty")
    d_ab = directed_distances(a, b, spacing)
    d_ba = directed_distances(b, a, spacing)
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))


# --------------------------------------------------------------------------- reporting

@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    dice_pct: float
    hd95_mm: float | None       # None when undefined
    sequence: str = "other"
    algorithm: str = "voxelstrip"


@dataclass
class Evaluation:
    cases: list = field(default_factory=list)
    errors: list = field(default_factory=list)     # (case_id, message)

    def summary(self):
        """sequence -> {"dice": (median, q1, q3), "hd95": (median, q1, q3) or None, "n": n}."""
        out = {}
        for seq in sorted({c.sequence for c in self.cases}):
            rows = [c for c in self.cases if c.sequence == seq]
            hd = sorted(c.hd95_mm for c in rows if c.hd95_mm is not None)
            out[seq] = {"dice": median_iqr(sorted(c.dice_pct for c in rows)),
                        "hd95": median_iqr(hd) if hd else None,
                        "n": len(rows)}
        return out


def evaluate_pair(case_id, gt: BrainMask, pm: BrainMask, sequence="other",
                  algorithm="voxelstrip") -> CaseMetrics:
    check_same_grid(gt, pm)
    try:
        h = hd95(gt, pm)
    except EmptyMask:
        h = None
    return CaseMetrics(case_id, dice(gt, pm), h, sequence, algorithm)


def _mask_files(directory: Path):
    found = {}
    for p in sorted(directory.iterdir()):
        for suffix in ("_mask.nii.gz", "_mask.nii"):
            if p.name.endswith(suffix):
                found[p.name[: -len(suffix)]] = p
    return found


def _load_mask(path):
    return BrainMask.from_volume(read_nifti(path))


def evaluate_cases(pred_dir, gt_dir, sequence="other", algorithm="voxelstrip") -> Evaluation:
    """Score every ``<case>_mask.nii[.gz]`` in ``gt_dir`` against its namesake in ``pred_dir``.

    Missing predictions and per-case failures are recorded in ``errors``.
    """
    gts = _mask_files(Path(gt_dir))
    preds = _mask_files(Path(pred_dir))
    if not set(gts) & set(preds):
        raise NoMatchingCases(f"no case in {pred_dir} matches {gt_dir}")
    ev = Evaluation()
    for case_id, gpath in gts.items():
        if case_id not in preds:
            ev.errors.append((case_id, "missing prediction"))
            continue
        try:
            ev.cases.append(evaluate_pair(case_id, _load_mask(gpath), _load_mask(preds[case_id]),
                                          sequence, algorithm))
        except (VoxelstripError, OSError) as exc:
            ev.errors.append((case_id, f"{type(exc).__name__}: {exc}"))
    for case_id in sorted(set(preds) - set(gts)):
        ev.errors.append((case_id, "missing ground truth"))
    return ev


CSV_HEADER = ["case_id", "sequence", "algorithm", "dice", "hd95_mm"]


def write_metrics_csv(cases, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for c in cases:
            hd = "NA" if c.hd95_mm is None else repr(float(c.hd95_mm))
            w.writerow([c.case_id, c.sequence, c.algorithm, repr(float(c.dice_pct)), hd])


def read_metrics_csv(path):
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for r in reader:
            hd = None if r["hd95_mm"] in ("NA", "") else float(r["hd95_mm"])
            if hd is not None and math.isnan(hd):
                hd = None
            out.append(CaseMetrics(r["case_id"], float(r["dice"]), hd, r["sequence"],
                                   r["algorithm"]))
    return out
