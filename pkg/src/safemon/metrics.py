"""Calibration and discrimination metrics for probability estimates.

All functions take parallel arrays: ``estimates`` (floats in [0, 1]) and
``outcomes`` (booleans, True when the predicted desirable event occurred).
Binned statistics use 10 fixed-width bins [0, 0.1), ..., [0.9, 1.0]; the top
bin is closed so an estimate of exactly 1.0 lands in a bin.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

N_BINS = 10


class PredictionRecord(NamedTuple):
    """One probability estimate paired with whether the event occurred."""

    estimate: float
    outcome: bool


def _as_arrays(estimates, outcomes) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(estimates, dtype=np.float64)
    y = np.asarray(outcomes, dtype=bool)
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError("estimates and outcomes must be equal-length 1-D arrays")
    if p.size == 0:
        raise ValueError("no prediction records")
    if np.any((p < 0.0) | (p > 1.0)):
        raise ValueError("estimates must lie in [0, 1]")
    return p, y


def _bin_indices(p: np.ndarray) -> np.ndarray:
    # [0,0.1), ..., [0.9,1.0]; 1.0 joins the top bin.
    return np.minimum((p * N_BINS).astype(np.int64), N_BINS - 1)


def _bin_stats(p: np.ndarray, y: np.ndarray):
    idx = _bin_indices(p)
    counts = np.bincount(idx, minlength=N_BINS)
    sum_p = np.bincount(idx, weights=p, minlength=N_BINS)
    sum_y = np.bincount(idx, weights=y.astype(np.float64), minlength=N_BINS)
    with np.errstate(invalid="ignore"):
        mean_p = np.where(counts > 0, sum_p / np.maximum(counts, 1), np.nan)
        freq = np.where(counts > 0, sum_y / np.maximum(counts, 1), np.nan)
    return counts, mean_p, freq


def ece(estimates, outcomes) -> float:
    """Expected calibration error: count-weighted mean of per-bin |mean p - freq|."""
    p, y = _as_arrays(estimates, outcomes)
    counts, mean_p, freq = _bin_stats(p, y)
    occ = counts > 0
    return float(np.sum(counts[occ] * np.abs(mean_p[occ] - freq[occ])) / p.size)


def ecce(estimates, outcomes) -> float:
    """One-sided variant of :func:`ece`: only overconfident bins contribute.

    A bin counts toward the error only when its mean estimate exceeds the
    empirical frequency, i.e. when the estimator overstated the probability
    of the desirable event.  Always <= :func:`ece`.
    """
    p, y = _as_arrays(estimates, outcomes)
    counts, mean_p, freq = _bin_stats(p, y)
    occ = counts > 0
    gap = mean_p[occ] - freq[occ]
    gap = np.where(gap > 0.0, gap, 0.0)
    return float(np.sum(counts[occ] * gap) / p.size)


def brier(estimates, outcomes) -> float:
    """Mean squared error of the probability estimates."""
    p, y = _as_arrays(estimates, outcomes)
    return float(np.mean((p - y.astype(np.float64)) ** 2))


def roc_curve(estimates, outcomes) -> tuple[np.ndarray, float]:
    """ROC curve and AUC, treating the event (True outcome) as positive.

    Sweeps a threshold over the unique estimate values from high to low;
    records with equal estimates share a threshold point, which gives tied
    pairs half credit, so the trapezoid AUC equals concordant-pair counting.

    Returns:
        (points, auc) where points is an (n, 2) array of (FPR, TPR) pairs
        including (0, 0) and (1, 1).

    Raises:
        ValueError: if only one outcome class is present (AUC undefined).
    """
    p, y = _as_arrays(estimates, outcomes)
    n_pos = int(np.count_nonzero(y))
    n_neg = p.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: records contain a single outcome class")
    order = np.argsort(-p, kind="stable")
    p_sorted = p[order]
    y_sorted = y[order]
    # group ties: indices where a new unique value starts
    boundaries = np.flatnonzero(np.diff(p_sorted)) + 1
    group_ends = np.append(boundaries, p_sorted.size)
    tp = np.cumsum(y_sorted)[group_ends - 1]
    fp = group_ends - tp
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    if tpr[-1] != 1.0 or fpr[-1] != 1.0:
        tpr = np.append(tpr, 1.0)
        fpr = np.append(fpr, 1.0)
    auc = float(np.trapezoid(tpr, fpr))
    return np.column_stack([fpr, tpr]), auc


def roc_auc(estimates, outcomes) -> float:
    return roc_curve(estimates, outcomes)[1]


@dataclass(frozen=True)
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    mean_estimate: float
    empirical_freq: float
    plottable: bool


def reliability_bins(estimates, outcomes, min_count: int = 50) -> list[ReliabilityBin]:
    """The 10 fixed bins with counts, mean estimate, and empirical frequency.

    Bins below ``min_count`` are flagged not plottable but still carry their
    statistics; weighted metrics include them regardless, only plots filter.
    """
    p, y = _as_arrays(estimates, outcomes)
    counts, mean_p, freq = _bin_stats(p, y)
    bins = []
    for b in range(N_BINS):
        bins.append(
            ReliabilityBin(
                lo=b / N_BINS,
                hi=(b + 1) / N_BINS,
                count=int(counts[b]),
                mean_estimate=float(mean_p[b]),
                empirical_freq=float(freq[b]),
                plottable=bool(counts[b] >= min_count),
            )
        )
    return bins


@dataclass(frozen=True)
class CalibrationReport:
    """Binned reliability data plus the scalar metrics for one estimator."""

    bins: tuple[ReliabilityBin, ...]
    ece: float
    ecce: float
    brier: float
    auc: float


def calibration_report(
    estimates, outcomes, min_count: int = 50, strict_auc: bool = True
) -> CalibrationReport:
    """All metrics at once.  With ``strict_auc=False`` a single-class record
    set yields ``auc=nan`` instead of raising (calibration metrics remain
    well-defined without both outcomes)."""
    try:
        auc = roc_auc(estimates, outcomes)
    except ValueError:
        if strict_auc:
            raise
        auc = float("nan")
    return CalibrationReport(
        bins=tuple(reliability_bins(estimates, outcomes, min_count)),
        ece=ece(estimates, outcomes),
        ecce=ecce(estimates, outcomes),
        brier=brier(estimates, outcomes),
        auc=auc,
    )


# -- export ------------------------------------------------------------------


def reliability_csv(bins: Sequence[ReliabilityBin]) -> str:
    lines = ["bin_lo,bin_hi,count,mean_estimate,empirical_freq,plottable"]
    for b in bins:
        mean_s = "" if np.isnan(b.mean_estimate) else f"{b.mean_estimate:.17g}"
        freq_s = "" if np.isnan(b.empirical_freq) else f"{b.empirical_freq:.17g}"
        lines.append(f"{b.lo:.1f},{b.hi:.1f},{b.count},{mean_s},{freq_s},{int(b.plottable)}")
    return "\n".join(lines) + "\n"


def roc_csv(points: np.ndarray) -> str:
    lines = ["fpr,tpr"]
    for fpr, tpr in points:
        lines.append(f"{fpr:.17g},{tpr:.17g}")
    return "\n".join(lines) + "\n"
