"""Nonparametric comparison statistics for per-case segmentation metrics.

Wilcoxon matched-pairs signed-rank test (normal approximation), Friedman
test, Bonferroni adjustment and the r = |Z| / sqrt(N) effect size.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .errors import AllZeroDifferences, EmptyInput, MissingData, ShapeMismatch

ALTERNATIVES = ("greater", "less", "two_sided")


def median_iqr(values):
    """``(median, q1, q3)`` with linear interpolation at position p*(n-1)."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyInput("median_iqr of an empty sample")
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    return float(med), float(q1), float(q3)


@dataclass(frozen=True)
class PairedSample:
    values_a: np.ndarray
    values_b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.values_a, dtype=np.float64).ravel()
        b = np.asarray(self.values_b, dtype=np.float64).ravel()
        if a.size == 0 or a.shape != b.shape:
            raise ShapeMismatch(f"paired samples need equal nonzero lengths, got {a.size}, {b.size}")
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise MissingData("paired samples contain non-finite values")
        object.__setattr__(self, "values_a", a)
        object.__setattr__(self, "values_b", b)


@dataclass(frozen=True)
class WilcoxonResult:
    z: float           # signed; positive when a tends to exceed b
    p: float
    n: int             # nonzero differences used
    n_zero: int        # zero differences dropped
    w_plus: float

    @property
    def abs_z(self) -> float:
        return abs(self.z)


def _signed_ranks(d):
    ranks = sps.rankdata(np.abs(d))   # average ranks for ties
    _, counts = np.unique(np.abs(d), return_counts=True)
    return ranks, counts


def wilcoxon_signed_rank(a, b=None, alternative: str = "greater") -> WilcoxonResult:
    """Signed-rank test of ``a - b`` using the normal approximation.

    Zero differences are dropped. Ties in ``|d|`` get average ranks and a
    variance correction; a 0.5 continuity correction is applied toward the
    null for the chosen alternative. ``a`` may also be a PairedSample.
    """
    if alternative not in ALTERNATIVES:
        raise ValueError(f"alternative must be one of {ALTERNATIVES}")
    s = a if isinstance(a, PairedSample) else PairedSample(a, b)
    d = s.values_a - s.values_b
    nz = d != 0
    d = d[nz]
    n = d.size
    if n == 0:
        raise AllZeroDifferences("all paired differences are zero")
    ranks, counts = _signed_ranks(d)
    w_plus = float(ranks[d > 0].sum())
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((counts ** 3 - counts).sum()) / 48.0
    sd = np.sqrt(var)
    dev = w_plus - mean
    if alternative == "greater":
        p = sps.norm.sf((dev - 0.5) / sd)
    elif alternative == "less":
        p = sps.norm.cdf((dev + 0.5) / sd)
    else:
        p = min(1.0, 2 * sps.norm.sf(max(abs(dev) - 0.5, 0.0) / sd))
    z = np.sign(dev) * max(abs(dev) - 0.5, 0.0) / sd
    return WilcoxonResult(float(z), float(min(max(p, 0.0), 1.0)), n, int((~nz).sum()), w_plus)


def wilcoxon_exact_p(a, b, alternative: str = "greater") -> float:
    """Exact permutation p value by enumerating all 2**n sign patterns (test oracle; n <= 20)."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise AllZeroDifferences("all paired differences are zero")
    if n > 20:
        raise ValueError("exact enumeration is limited to n <= 20")
    ranks = sps.rankdata(np.abs(d))
    observed = ranks[d > 0].sum()
    signs = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.float64)
    w = signs @ ranks
    mean = n * (n + 1) / 4.0
    tol = 1e-9
    if alternative == "greater":
        return float(np.mean(w >= observed - tol))
    if alternative == "less":
        return float(np.mean(w <= observed + tol))
    return float(min(1.0, np.mean(np.abs(w - mean) >= abs(observed - mean) - tol)))


def friedman(matrix):
    """Friedman test on an n_cases x k_algorithms matrix. Returns ``(chi2, p)``.

    Ranks are taken within rows (average ranks for ties) and the statistic
    is divided by the usual tie correction. A fully tied matrix gives (0, 1).
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ShapeMismatch(f"friedman needs n >= 2 rows and k >= 2 columns, got {x.shape}")
    if not np.isfinite(x).all():
        raise MissingData("friedman requires complete data; incomplete designs "
                          "(Skillings-Mack) are not supported")
    n, k = x.shape
    ranks = np.apply_along_axis(sps.rankdata, 1, x)
    rbar = ranks.mean(axis=0)
    chi2 = 12.0 * n / (k * (k + 1)) * float(((rbar - (k + 1) / 2.0) ** 2).sum())
    ties = 0.0
    for row in x:
        _, c = np.unique(row, return_counts=True)
        ties += float((c ** 3 - c).sum())
    denom = 1.0 - ties / (n * (k ** 3 - k))
    if denom <= 0:
        return 0.0, 1.0
    chi2 /= denom
    return float(chi2), float(sps.chi2.sf(chi2, k - 1))


def bonferroni(p_values, m: int):
    """``min(1, p * m)`` elementwise; returns a float for scalar input."""
    if m < 1:
        raise ValueError("m must be >= 1")
    p = np.asarray(p_values, dtype=np.float64)
    if ((p < 0) | (p > 1)).any():
        raise ValueError("p values must lie in [0, 1]")
    adj = np.minimum(1.0, p * m)
    return float(adj) if adj.ndim == 0 else adj


def effect_size_r(abs_z: float, n_pairs: int) -> float:
    """r = |Z| / sqrt(N) with N = 2 * n_pairs observations."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    return abs(float(abs_z)) / np.sqrt(2.0 * n_pairs)


# --------------------------------------------------------------------------- reports

@dataclass(frozen=True)
class StatsReport:
    comparison: str
    abs_z: float
    p_raw: float
    p_bonferroni: float
    effect_r: float
    n: int
    n_zero: int = 0


def compare(reference, others: dict, metric: str = "dice", alternative: str = "greater"):
    """Wilcoxon-compare ``reference`` (case_id -> value) with each entry of ``others``.

    Only cases present in both samples are paired. Bonferroni uses m = number of
    comparisons. Returns ``(reports, errors)``; a comparison that cannot be
    computed is listed in ``errors`` as ``(label, message)``.
    """
    reports, errors, raw = [], [], []
    m = max(len(others), 1)
    for label, values in others.items():
        common = sorted(set(reference) & set(values))
        try:
            if not common:
                raise EmptyInput("no cases in common")
            a = [reference[c] for c in common]
            b = [values[c] for c in common]
            res = wilcoxon_signed_rank(a, b, alternative)
        except (AllZeroDifferences, EmptyInput, MissingData) as exc:
            errors.append((label, f"{type(exc).__name__}: {exc}"))
            continue
        raw.append((label, res))
    for label, res in raw:
        reports.append(StatsReport(label, res.abs_z, res.p, bonferroni(res.p, m),
                                   effect_size_r(res.abs_z, res.n), res.n, res.n_zero))
    return reports, errors


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["comparison", "abs_z", "p_raw", "p_bonferroni", "effect_r", "n"])
        for r in reports:
            w.writerow([r.comparison, f"{r.abs_z:.6g}", f"{r.p_raw:.6g}", f"{r.p_bonferroni:.6g}",
                        f"{r.effect_r:.6g}", r.n])
