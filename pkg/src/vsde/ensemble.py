"""Permutation-diverse model ensemble with spectral score aggregation.

Each member trains the same objective under a different random feature
ordering.  At scoring time the per-member log-likelihood columns form a
score matrix whose covariance is approximately rank-one when member
errors are independent; the absolute entries of its leading eigenvector,
L1-normalized, weight the members.  Higher aggregated log-likelihood
means more normal, so the anomaly score is its negation.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    PERMUTATION_STREAM,
    PermutationSpec,
    StandardizationParams,
    Table,
    sample_permutations,
)
from .density import ARModelParams, PNNConfig, batch_log_density, load_model, save_model
from .numerics import DomainError, RngStream, leading_eigenvector, sample_covariance
from .training import TRAIN_STREAM, EpochStats, TrainConfig, train_model

__all__ = [
    "EnsembleConfig",
    "EnsembleModel",
    "EnsembleTrainingError",
    "ScoreMatrix",
    "aggregate",
    "load_ensemble",
    "save_ensemble",
    "score",
    "score_matrix",
    "spectral_weights",
    "train_ensemble",
]

ENSEMBLE_FORMAT = "vsde-ensemble-v1"

#: Retry budget when redrawing duplicate member permutations.
_DUPLICATE_RETRIES = 100


class EnsembleTrainingError(RuntimeError):
    """Training of one ensemble member failed; names the member."""


@dataclass(frozen=True)
class EnsembleConfig:
    """Ensemble-level settings wrapped around a TrainConfig."""

    n_perm: int = 3
    n_seeds: int = 3
    aggregation: str = "spectral"
    include_identity_ablation: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.n_perm < 1:
            raise DomainError("n_perm must be at least 1")
        if self.n_seeds < 1:
            raise DomainError("n_seeds must be at least 1")
        if self.aggregation not in ("spectral", "mean"):
            raise DomainError("aggregation must be 'spectral' or 'mean'")


@dataclass
class ScoreMatrix:
    """N x K per-member log-likelihood scores; all entries finite."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise DomainError("score matrix must be 2-d")
        if not np.all(np.isfinite(values)):
            raise DomainError("score matrix contains non-finite entries")
        self.values = values

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]


@dataclass
class EnsembleModel:
    """Trained members (each carrying its permutation), the standardizer
    they expect, and, once fitted, the aggregation weights."""

    members: list[ARModelParams]
    standardization: StandardizationParams | None = None
    aggregation: str = "spectral"
    weights: np.ndarray | None = None
    training_logs: list[list[EpochStats]] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.members)


def _draw_member_permutations(d: int, cfg: EnsembleConfig) -> list[PermutationSpec]:
    if cfg.include_identity_ablation:
        # no-permutation ablation: a single identity member
        return sample_permutations(d, 1, cfg.train.seed, include_identity=True)
    rng = RngStream(cfg.train.seed, PERMUTATION_STREAM)
    dedup = math.factorial(d) >= cfg.n_perm
    perms: list[PermutationSpec] = []
    retries = 0
    while len(perms) < cfg.n_perm:
        candidate = PermutationSpec(tuple(rng.generator.permutation(d)))
        if dedup and candidate in perms:
            retries += 1
            if retries > _DUPLICATE_RETRIES:
                raise DomainError(
                    f"could not draw {cfg.n_perm} distinct permutations of {d} features"
                )
            continue
        perms.append(candidate)
    return perms


def train_ensemble(
    train: Table,
    cfg: EnsembleConfig,
    standardization: StandardizationParams | None = None,
    pnn: PNNConfig = PNNConfig(),
    conditioner_widths: tuple[int, ...] = (64, 64),
) -> EnsembleModel:
    """Train one model per feature permutation with stream-split seeds.

    Weights stay unfitted until scoring.  Member training failures are
    re-raised annotated with the member index.
    """
    if train.n == 0:
        raise DomainError("training table is empty")
    perms = _draw_member_permutations(train.d, cfg)
    members: list[ARModelParams] = []
    logs: list[list[EpochStats]] = []
    for index, perm in enumerate(perms):
        rng = RngStream(cfg.train.seed, TRAIN_STREAM + index)
        try:
            model, log = train_model(train, cfg.train, perm, pnn, conditioner_widths, rng)
        except Exception as err:
            raise EnsembleTrainingError(f"ensemble member {index} failed: {err}") from err
        members.append(model)
        logs.append(log)
    return EnsembleModel(members, standardization, cfg.aggregation, None, logs)


def score_matrix(model: EnsembleModel, table: Table) -> ScoreMatrix:
    """Column per member: its eval-mode log-density of each row.  The
    table must already be standardized with the model's parameters."""
    if model.k == 0:
        raise DomainError("ensemble has no members")
    if table.d != model.members[0].dim:
        raise DomainError(
            f"table has {table.d} features but the model expects {model.members[0].dim}"
        )
    columns = [batch_log_density(member, table.values) for member in model.members]
    return ScoreMatrix(np.column_stack(columns))


def spectral_weights(scores: ScoreMatrix) -> np.ndarray:
    """Member weights |v| / sum|v| from the leading eigenvector v of the
    score covariance.  The L1 normalization only fixes the scale, which
    ranking-based metrics never see."""
    if scores.k == 1:
        return np.ones(1)
    cov = sample_covariance(scores.values)
    if not cov.any():
        warnings.warn(
            "score covariance is identically zero; falling back to uniform weights",
            stacklevel=2,
        )
        return np.full(scores.k, 1.0 / scores.k)
    v = np.abs(leading_eigenvector(cov))
    return v / v.sum()


def aggregate(scores: ScoreMatrix, weights) -> np.ndarray:
    """Weighted sum of member scores per row; higher means more normal."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (scores.k,):
        raise DomainError(f"expected {scores.k} weights, got shape {weights.shape}")
    return scores.values @ weights


def score(
    model: EnsembleModel, table: Table, weights_from: Table | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Anomaly scores (higher = more anomalous) plus the fitted weights.

    Spectral weights are fitted on the scored set itself unless
    ``weights_from`` supplies a separate (standardized) table; the mean
    ablation uses uniform weights.  Fitted weights are cached on the model.
    """
    matrix = score_matrix(model, table)
    if model.aggregation == "mean":
        weights = np.full(matrix.k, 1.0 / matrix.k)
    elif weights_from is not None:
        weights = spectral_weights(score_matrix(model, weights_from))
    else:
        weights = spectral_weights(matrix)
    model.weights = weights
    return -aggregate(matrix, weights), weights


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_ensemble(directory, model: EnsembleModel, extra: dict | None = None) -> None:
    """Model directory: manifest, one npz per member, standardizer text
    file.  JSON floats round-trip exactly (shortest-repr encoding)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": ENSEMBLE_FORMAT,
        "n_members": model.k,
        "aggregation": model.aggregation,
        "weights": None if model.weights is None else [float(w) for w in model.weights],
        "members": [f"member_{i:03d}.npz" for i in range(model.k)],
        "standardization": "standardization.txt" if model.standardization else None,
    }
    if extra:
        manifest["run"] = extra
    for name, member in zip(manifest["members"], model.members):
        save_model(directory / name, member)
    if model.standardization is not None:
        model.standardization.to_text(directory / "standardization.txt")
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_ensemble(directory) -> EnsembleModel:
    directory = Path(directory)
    with open(directory / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != ENSEMBLE_FORMAT:
        raise DomainError(f"unsupported ensemble format {manifest.get('format')!r}")
    members = [load_model(directory / name) for name in manifest["members"]]
    standardization = None
    if manifest.get("standardization"):
        standardization = StandardizationParams.from_text(
            directory / manifest["standardization"]
        )
    weights = manifest.get("weights")
    return EnsembleModel(
        members,
        standardization,
        manifest.get("aggregation", "spectral"),
        None if weights is None else np.asarray(weights, dtype=float),
    )
