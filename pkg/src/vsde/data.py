"""Dataset ingestion, standardization, splitting, permutations, and the
synthetic benchmark generator.

Conventions: tables are row-major float64 matrices with optional binary
labels (1 = anomaly).  Tables are immutable; every operation returns a
new one.  CSV is the single ingestion format: one header row, '.' decimal
separator, optional trailing label column.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import DomainError, RngStream

__all__ = [
    "ParseError",
    "PermutationSpec",
    "SplitSpec",
    "StandardizationParams",
    "Table",
    "TableSummary",
    "apply_permutation",
    "apply_standardizer",
    "fit_apply_standardizer",
    "fit_standardizer",
    "generate_synthetic",
    "inject_contamination",
    "load_table",
    "sample_permutations",
    "save_table",
    "split_5050",
]

SPLIT_STREAM = 1
PERMUTATION_STREAM = 2
CONTAMINATION_STREAM = 3
SYNTHETIC_STREAM = 4

#: Default compact support of the density model, in standardized units.
#: z-scores beyond 10 are effectively impossible for normal data, so
#: clamping test outliers to the boundary keeps them in the CDF tail.
DEFAULT_SUPPORT = (-10.0, 10.0)

#: Margin kept between clamped values and the support boundary.
CLAMP_MARGIN = 1e-4

#: Covariance of the two anomaly clusters in the synthetic data.  The
#: strong off-diagonal correlation produces visibly skewed clusters.
SYNTHETIC_ANOMALY_COV = ((1.0, 0.9), (0.9, 1.0))


class ParseError(ValueError):
    """A CSV cell or row could not be parsed; carries its coordinates."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class Table:
    """Immutable numeric dataset with optional binary anomaly labels."""

    values: np.ndarray
    feature_names: tuple[str, ...]
    labels: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise DomainError("table values must be a 2-d matrix")
        if not np.all(np.isfinite(values)):
            raise DomainError("table values must be finite")
        if len(self.feature_names) != values.shape[1]:
            raise DomainError("feature name count does not match column count")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=int)
            if labels.shape != (values.shape[0],):
                raise DomainError("label count does not match row count")
            if not np.all((labels == 0) | (labels == 1)):
                raise DomainError("labels must be 0 or 1")
            labels = labels.copy()
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def take_rows(self, indices) -> "Table":
        labels = None if self.labels is None else self.labels[indices]
        return Table(self.values[indices], self.feature_names, labels)

    def drop_labels(self) -> "Table":
        return Table(self.values, self.feature_names)


@dataclass(frozen=True)
class TableSummary:
    n_rows: int
    n_features: int
    anomaly_fraction: float | None
    n_rejected_rows: int = 0


@dataclass(frozen=True)
class StandardizationParams:
    """Per-feature location/scale; scales are strictly positive."""

    mean: np.ndarray
    std: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        std = np.asarray(self.std, dtype=float)
        if mean.shape != std.shape or mean.ndim != 1:
            raise DomainError("mean and std must be 1-d and the same length")
        if np.any(std <= 0):
            raise DomainError("standard deviations must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def to_text(self, path) -> None:
        lines = []
        for name, m, s in zip(self.feature_names, self.mean, self.std):
            lines.append(f"{name}.mean = {float(m)!r}")
            lines.append(f"{name}.std = {float(s)!r}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_text(cls, path) -> "StandardizationParams":
        entries: dict[str, dict[str, float]] = {}
        order: list[str] = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                name, _, kind = key.strip().rpartition(".")
                if name not in entries:
                    entries[name] = {}
                    order.append(name)
                entries[name][kind] = float(value.strip())
        mean = np.array([entries[name]["mean"] for name in order])
        std = np.array([entries[name]["std"] for name in order])
        return cls(mean, std, tuple(order))


@dataclass(frozen=True)
class PermutationSpec:
    """A feature ordering: position k of the model reads column order[k]."""

    order: tuple[int, ...]

    def __post_init__(self):
        order = tuple(int(i) for i in self.order)
        if sorted(order) != list(range(len(order))):
            raise DomainError(f"not a permutation of 0..{len(order) - 1}: {order}")
        object.__setattr__(self, "order", order)

    @classmethod
    def identity(cls, d: int) -> "PermutationSpec":
        return cls(tuple(range(d)))

    @property
    def d(self) -> int:
        return len(self.order)

    def inverse(self) -> "PermutationSpec":
        inv = [0] * len(self.order)
        for pos, col in enumerate(self.order):
            inv[col] = pos
        return PermutationSpec(tuple(inv))

    def apply_to_vector(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[list(self.order)]

    def apply_to_matrix(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[:, list(self.order)]


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    train_fraction: float = 0.5


def load_table(path, has_labels: bool = False) -> tuple[Table, TableSummary]:
    """Load a CSV file (header row + numeric body) into a Table.

    Rows containing non-finite numbers (nan/inf) are rejected and
    counted; cells that do not parse as numbers at all raise
    :class:`ParseError` with 1-based row and column coordinates.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if has_labels:
            if len(header) < 2:
                raise ParseError(f"{path}: need at least one feature and a label column")
            feature_names = tuple(header[:-1])
        else:
            feature_names = tuple(header)
        n_cols = len(header)

        rows: list[list[float]] = []
        labels: list[int] = []
        n_rejected = 0
        for line_no, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != n_cols:
                raise ParseError(
                    f"{path}: row {line_no} has {len(cells)} cells, expected {n_cols}",
                    row=line_no,
                )
            parsed = []
            for name, cell in zip(header, cells):
                try:
                    parsed.append(float(cell.strip()))
                except ValueError:
                    raise ParseError(
                        f"{path}: row {line_no}, column {name!r}: "
                        f"cannot parse {cell.strip()!r} as a number",
                        row=line_no,
                        column=name,
                    ) from None
            if not all(math.isfinite(v) for v in parsed):
                n_rejected += 1
                continue
            if has_labels:
                lab = parsed[-1]
                if lab not in (0.0, 1.0):
                    raise ParseError(
                        f"{path}: row {line_no}: label must be 0 or 1, got {lab}",
                        row=line_no,
                        column=header[-1],
                    )
                labels.append(int(lab))
                rows.append(parsed[:-1])
            else:
                rows.append(parsed)

    if not rows:
        raise ParseError(f"{path}: no usable data rows")
    values = np.array(rows, dtype=float)
    table = Table(values, feature_names, np.array(labels) if has_labels else None)
    frac = float(np.mean(table.labels)) if has_labels else None
    return table, TableSummary(table.n, table.d, frac, n_rejected)


def save_table(path, table: Table) -> None:
    """Write a Table back to CSV (labels, when present, as a last column)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        header = list(table.feature_names)
        if table.labels is not None:
            header.append("label")
        writer.writerow(header)
        for i in range(table.n):
            row = [repr(float(v)) for v in table.values[i]]
            if table.labels is not None:
                row.append(str(int(table.labels[i])))
            writer.writerow(row)


def fit_standardizer(train: Table) -> StandardizationParams:
    """Per-feature mean and (population) std from the training table.

    Constant features get std 1, so they map to constant 0 and the
    column count stays aligned with feature permutations.
    """
    if train.n == 0:
        raise DomainError("cannot fit a standardizer on an empty table")
    mean = train.values.mean(axis=0)
    std = train.values.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return StandardizationParams(mean, std, train.feature_names)


def apply_standardizer(
    params: StandardizationParams,
    table: Table,
    support: tuple[float, float] = DEFAULT_SUPPORT,
    margin: float = CLAMP_MARGIN,
) -> tuple[Table, int]:
    """Transform (x - mean) / std, then clamp into the open model support.

    Returns the transformed table and the number of clamped entries.
    """
    z = (table.values - params.mean) / params.std
    lo, hi = support[0] + margin, support[1] - margin
    n_clamped = int(np.sum((z < lo) | (z > hi)))
    z = np.clip(z, lo, hi)
    return Table(z, table.feature_names, table.labels), n_clamped


def fit_apply_standardizer(
    train: Table,
    others: list[Table] | None = None,
    support: tuple[float, float] = DEFAULT_SUPPORT,
) -> tuple[StandardizationParams, list[Table], list[int]]:
    """Fit on the training table only, transform train plus any others.

    Returns (params, [train', others'...], clamp counts per table).
    """
    params = fit_standardizer(train)
    tables = [train] + list(others or [])
    out, counts = [], []
    for t in tables:
        tt, c = apply_standardizer(params, t, support)
        out.append(tt)
        counts.append(c)
    return params, out, counts


def split_5050(table: Table, spec: SplitSpec) -> tuple[Table, Table]:
    """The benchmark split: normals are shuffled and halved; anomalies
    all go to the test side.

    Train keeps no labels.  Odd normal counts give the extra row to test.
    """
    if table.labels is None:
        raise DomainError("split requires a labeled table")
    normal_idx = np.flatnonzero(table.labels == 0)
    anomaly_idx = np.flatnonzero(table.labels == 1)
    if normal_idx.size < 2:
        raise DomainError(f"need at least 2 normal rows to split, got {normal_idx.size}")
    rng = RngStream(spec.seed, SPLIT_STREAM)
    shuffled = rng.generator.permutation(normal_idx)
    n_train = int(normal_idx.size * spec.train_fraction)
    train = table.take_rows(shuffled[:n_train]).drop_labels()
    test = table.take_rows(np.concatenate([shuffled[n_train:], anomaly_idx]))
    return train, test


def sample_permutations(
    d: int, k: int, seed: int, include_identity: bool = False
) -> list[PermutationSpec]:
    """Draw k feature permutations uniformly and independently.

    With ``include_identity`` the first entry is the identity ordering
    (this realizes the no-permutation ablation with k=1).
    """
    if d == 0:
        raise DomainError("cannot permute zero features")
    if k < 1:
        raise DomainError("need at least one permutation")
    rng = RngStream(seed, PERMUTATION_STREAM)
    out: list[PermutationSpec] = []
    if include_identity:
        out.append(PermutationSpec.identity(d))
    while len(out) < k:
        out.append(PermutationSpec(tuple(rng.generator.permutation(d))))
    return out


def apply_permutation(table: Table, perm: PermutationSpec) -> Table:
    """Reorder a table's columns (and names) by a permutation."""
    if perm.d != table.d:
        raise DomainError("permutation length does not match column count")
    names = tuple(table.feature_names[i] for i in perm.order)
    return Table(perm.apply_to_matrix(table.values), names, table.labels)


def generate_synthetic(
    seed: int, anomaly_cov=SYNTHETIC_ANOMALY_COV
) -> Table:
    """Two-dimensional benchmark data: 300 normals from three unit
    Gaussians at (0,0), (-5,-5), (5,5); 40 anomalies from two skewed
    Gaussians at (-5,5) and (5,-5)."""
    rng = RngStream(seed, SYNTHETIC_STREAM)
    gen = rng.generator
    normal_means = [(0.0, 0.0), (-5.0, -5.0), (5.0, 5.0)]
    anomaly_means = [(-5.0, 5.0), (5.0, -5.0)]
    cov = np.asarray(anomaly_cov, dtype=float)
    blocks = [gen.multivariate_normal(m, np.eye(2), size=100) for m in normal_means]
    blocks += [gen.multivariate_normal(m, cov, size=20) for m in anomaly_means]
    values = np.vstack(blocks)
    labels = np.concatenate([np.zeros(300, dtype=int), np.ones(40, dtype=int)])
    return Table(values, ("x1", "x2"), labels)


def inject_contamination(
    train: Table, anomalies: Table, rate: float, seed: int
) -> tuple[Table, np.ndarray]:
    """Mix ceil(rate * n_train) anomaly rows into the training table.

    Sampling is without replacement when possible (with replacement,
    under a warning, otherwise).  Returns the shuffled contaminated
    table (unlabeled: the trainer is label-blind) and the indices of the
    anomaly rows used, so the caller can drop them from its test set.
    """
    if not 0.0 <= rate <= 0.5:
        raise DomainError(f"contamination rate must be in [0, 0.5], got {rate}")
    if rate == 0.0:
        return train, np.array([], dtype=int)
    if anomalies.n == 0:
        raise DomainError("no anomaly rows available for contamination")
    n_inject = math.ceil(rate * train.n)
    rng = RngStream(seed, CONTAMINATION_STREAM)
    if n_inject <= anomalies.n:
        chosen = rng.generator.choice(anomalies.n, size=n_inject, replace=False)
    else:
        warnings.warn(
            f"requested {n_inject} contamination rows but only {anomalies.n} "
            "anomalies exist; sampling with replacement",
            stacklevel=2,
        )
        chosen = rng.generator.choice(anomalies.n, size=n_inject, replace=True)
    combined = np.vstack([train.values, anomalies.values[chosen]])
    order = rng.generator.permutation(combined.shape[0])
    return Table(combined[order], train.feature_names), chosen
