"""Scoring metrics and diagnostics: ROC-AUC, the class-conditional
log-likelihood variance ratio, performance profiles, and box-plot
statistics, plus the plain-text report writers used by the CLI."""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .numerics import DomainError, RngStream

__all__ = [
    "ProfileCurve",
    "SummaryStats",
    "VarianceRatioReport",
    "dolan_more",
    "roc_auc",
    "summary_stats",
    "variance_ratio",
    "write_csv",
    "write_metrics",
]

VARIANCE_RATIO_STREAM = 5


def _check_binary_labels(labels: np.ndarray):
    if not np.all((labels == 0) | (labels == 1)):
        raise DomainError("labels must be 0 or 1")
    if not (np.any(labels == 0) and np.any(labels == 1)):
        raise DomainError("need at least one sample of each class")


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..N with ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Probability that a random anomaly outscores a random normal, with
    ties counted half.  Rank-based, O(N log N)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DomainError("scores and labels must be 1-d and the same length")
    _check_binary_labels(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    ranks = _midranks(scores)
    rank_sum = float(np.sum(ranks[labels == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class VarianceRatioReport:
    """Log-likelihood spread per class on balanced subsamples.

    Variances are population (mean squared deviation); a ratio below 1
    means the density is more stable around normal samples.
    """

    sigma2_normal: float
    sigma2_anomal: float
    mu_normal: float
    mu_anomal: float
    ratio: float
    subsample_size: int
    seed: int


def variance_ratio(log_densities, labels, seed: int) -> VarianceRatioReport:
    """Balance the classes by subsampling normals down to the anomaly
    count (seeded, without replacement), then compare per-class
    log-likelihood variances."""
    log_densities = np.asarray(log_densities, dtype=float)
    labels = np.asarray(labels)
    if log_densities.shape != labels.shape or log_densities.ndim != 1:
        raise DomainError("log densities and labels must be 1-d and the same length")
    _check_binary_labels(labels)
    normal = log_densities[labels == 0]
    anomal = log_densities[labels == 1]
    size = min(normal.size, anomal.size)
    if normal.size > size:
        rng = RngStream(seed, VARIANCE_RATIO_STREAM)
        normal = normal[rng.generator.choice(normal.size, size=size, replace=False)]
    mu_n = float(np.mean(normal))
    mu_a = float(np.mean(anomal))
    s2_n = float(np.mean((normal - mu_n) ** 2))
    s2_a = float(np.mean((anomal - mu_a) ** 2))
    ratio = s2_n / s2_a if s2_a > 0 else math.nan
    return VarianceRatioReport(s2_n, s2_a, mu_n, mu_a, ratio, size, seed)


@dataclass(frozen=True)
class ProfileCurve:
    """Coverage per quality threshold for one method."""

    method: str
    thetas: np.ndarray
    coverage: np.ndarray


def dolan_more(auc_by_method_and_dataset, theta_grid, method_names=None) -> list[ProfileCurve]:
    """Performance profiles over an M x J AUC matrix: for each method,
    the fraction of datasets on which it reaches at least theta times
    the best method's AUC."""
    auc = np.asarray(auc_by_method_and_dataset, dtype=float)
    if auc.ndim != 2 or auc.size == 0:
        raise DomainError("expected a nonempty M x J AUC matrix")
    if np.any(auc < 0) or np.any(auc > 1):
        raise DomainError("AUC entries must lie in [0, 1]")
    thetas = np.asarray(theta_grid, dtype=float)
    m = auc.shape[0]
    if method_names is None:
        method_names = [f"method_{i}" for i in range(m)]
    best = auc.max(axis=0)
    curves = []
    for i in range(m):
        coverage = np.array([np.mean(auc[i] >= t * best) for t in thetas])
        curves.append(ProfileCurve(method_names[i], thetas, coverage))
    return curves


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    median: float
    q1: float
    q3: float
    min: float
    max: float


def summary_stats(values) -> SummaryStats:
    """Box-plot statistics; quartiles use linear interpolation (numpy's
    default percentile convention) so the numbers are reproducible."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise DomainError("cannot summarize an empty list")
    return SummaryStats(
        mean=float(np.mean(arr)),
        median=float(np.median(arr)),
        q1=float(np.percentile(arr, 25)),
        q3=float(np.percentile(arr, 75)),
        min=float(np.min(arr)),
        max=float(np.max(arr)),
    )


# ---------------------------------------------------------------------------
# report writers
# ---------------------------------------------------------------------------


def _format_value(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))  # shortest round-trip form; stable across runs
    return str(value)


def _atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_metrics(path, metrics: dict) -> None:
    """Flat key = value metrics file; floats in shortest-repr form so a
    rerun with the same inputs is byte-identical."""
    lines = [f"{key} = {_format_value(value)}" for key, value in metrics.items()]
    _atomic_write(path, "\n".join(lines) + "\n")


def write_csv(path, header: list[str], rows: list[list]) -> None:
    """Comma-separated report table, atomically replaced."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_value(cell) for cell in row))
    _atomic_write(path, "\n".join(lines) + "\n")
