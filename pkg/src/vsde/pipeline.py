"""End-to-end per-seed runs: split, standardize, optionally contaminate,
train the ensemble, score the held-out set, and compute metrics.

Seeds loop at this level — one full pipeline run per seed — and the
per-seed AUCs are aggregated by the caller, matching the benchmark
protocol of averaging over independent runs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import (
    SplitSpec,
    Table,
    fit_apply_standardizer,
    inject_contamination,
    split_5050,
)
from .density import PNNConfig
from .ensemble import (
    EnsembleConfig,
    EnsembleModel,
    aggregate,
    score_matrix,
    spectral_weights,
    train_ensemble,
)
from .evaluation import VarianceRatioReport, roc_auc, variance_ratio
from .numerics import DomainError

__all__ = ["SeedRunResult", "run_seed", "seeded_config"]


@dataclass
class SeedRunResult:
    """Everything one pipeline run produces for downstream reporting."""

    seed: int
    auc: float
    anomaly_scores: np.ndarray
    log_likelihoods: np.ndarray
    test_labels: np.ndarray
    weights: np.ndarray
    member_scores: np.ndarray
    model: EnsembleModel
    n_train: int
    n_test: int
    n_clamped_train: int
    n_clamped_test: int
    contamination_rate: float

    def variance_report(self) -> VarianceRatioReport:
        return variance_ratio(self.log_likelihoods, self.test_labels, self.seed)


def seeded_config(cfg: EnsembleConfig, seed: int) -> EnsembleConfig:
    """The same configuration re-keyed to a different run seed."""
    return replace(cfg, train=replace(cfg.train, seed=seed))


def run_seed(
    table: Table,
    seed: int,
    cfg: EnsembleConfig,
    pnn: PNNConfig = PNNConfig(),
    conditioner_widths: tuple[int, ...] = (64, 64),
    contamination_rate: float = 0.0,
) -> SeedRunResult:
    """One full run on a labeled table with the given seed.

    Contaminated runs move the sampled anomaly rows from the test side
    into the (label-blind) training side, so no row is both trained on
    and evaluated.
    """
    if table.labels is None:
        raise DomainError("the pipeline needs a labeled table")
    cfg = seeded_config(cfg, seed)
    train, test = split_5050(table, SplitSpec(seed=seed))

    if contamination_rate > 0.0:
        anomalies = table.take_rows(np.flatnonzero(table.labels == 1))
        train, used = inject_contamination(train, anomalies, contamination_rate, seed)
        # test rows are [held-out normals..., anomalies in original order]
        n_test_normals = test.n - anomalies.n
        drop = set(n_test_normals + used)
        keep = [i for i in range(test.n) if i not in drop]
        test = test.take_rows(np.array(keep, dtype=int))

    params, (train_std, test_std), (clamp_train, clamp_test) = fit_apply_standardizer(
        train, [test], support=pnn.support
    )
    model = train_ensemble(train_std, cfg, standardization=params, pnn=pnn,
                           conditioner_widths=conditioner_widths)
    matrix = score_matrix(model, test_std)
    if model.aggregation == "mean":
        weights = np.full(matrix.k, 1.0 / matrix.k)
    else:
        weights = spectral_weights(matrix)
    model.weights = weights
    anomaly_scores = -aggregate(matrix, weights)
    auc = roc_auc(anomaly_scores, test_std.labels)
    return SeedRunResult(
        seed=seed,
        auc=auc,
        anomaly_scores=anomaly_scores,
        log_likelihoods=-anomaly_scores,
        test_labels=np.asarray(test_std.labels),
        weights=weights,
        member_scores=matrix.values,
        model=model,
        n_train=train.n,
        n_test=test.n,
        n_clamped_train=clamp_train,
        n_clamped_test=clamp_test,
        contamination_rate=contamination_rate,
    )
