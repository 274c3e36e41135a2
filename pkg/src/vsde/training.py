"""Variance-regularized likelihood training of one density model.

The objective per minibatch is -mean(s) + lambda * var(s) where s are the
per-sample log-densities and var is the unbiased sample variance, so the
regularizer pushes the log-density toward a constant over normal samples.
Optimization is plain Adam with bias correction, a fixed epoch budget,
and global-norm gradient clipping as a guard against variance spikes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import PermutationSpec, Table
from .density import (
    ARModelParams,
    DegenerateNetworkError,
    PNNConfig,
    _model_batch,
    _model_batch_backward,
    init_ar_model,
)
from .numerics import DomainError, InsufficientDataError, RngStream

__all__ = [
    "AdamState",
    "EpochStats",
    "NonFiniteGradientError",
    "TrainConfig",
    "adam_step",
    "batch_size",
    "init_adam_state",
    "train_model",
    "vsde_batch_loss",
    "write_training_log",
]

#: Stream id for a standalone train_model call; ensemble members use
#: TRAIN_STREAM + member index.
TRAIN_STREAM = 16


class NonFiniteGradientError(RuntimeError):
    """A gradient block went non-finite; names the offending block."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults follow the benchmark protocol."""

    lam: float = 3.33
    learning_rate: float = 1e-4
    dropout: float = 0.1
    batch_min: int = 16
    batch_max: int = 8096
    epochs: int = 500
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    lambda_zero: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise DomainError("lambda must be nonnegative")
        if self.batch_min > self.batch_max:
            raise DomainError("batch_min must not exceed batch_max")
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError("dropout must be in [0, 1)")
        if self.learning_rate <= 0:
            raise DomainError("learning rate must be positive")
        if self.epochs < 0:
            raise DomainError("epochs must be nonnegative")

    @property
    def effective_lam(self) -> float:
        """The regularization weight actually applied (0 under the
        no-regularizer ablation)."""
        return 0.0 if self.lambda_zero else self.lam


def batch_size(n: int, cfg: TrainConfig) -> int:
    """N/10 rounded down, clamped into [batch_min, batch_max]."""
    if n < 1:
        raise DomainError("training set must be nonempty")
    return int(min(max(n // 10, cfg.batch_min), cfg.batch_max))


def _loss_from_scores(s: np.ndarray, lam: float) -> tuple[float, float, float]:
    """(loss, mean, var) with exactly rounded sums, so the result does
    not depend on row order."""
    b = s.size
    mean = math.fsum(s) / b
    if lam > 0.0 or b >= 2:
        var = math.fsum((s - mean) ** 2) / (b - 1) if b >= 2 else 0.0
    else:
        var = 0.0
    return -mean + lam * var, mean, var


def vsde_batch_loss(
    model: ARModelParams,
    batch: np.ndarray,
    lam: float,
    rng: RngStream | None = None,
    mode: str = "train",
) -> tuple[float, np.ndarray]:
    """Regularized negative log-likelihood of one minibatch.

    Returns the loss and the per-sample log-densities.  The batch is in
    the model's own (permuted) feature order, as during training.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 2:
        raise DomainError("batch must be a B x D matrix")
    if lam < 0:
        raise DomainError("lambda must be nonnegative")
    if lam > 0 and batch.shape[0] < 2:
        raise InsufficientDataError("the variance term needs a batch of at least 2")
    s, _ = _model_batch(model, batch, mode, rng)
    loss, _, _ = _loss_from_scores(s, lam)
    return loss, s


def _loss_grads(
    model: ARModelParams, batch: np.ndarray, lam: float, rng: RngStream | None,
    mode: str = "train",
):
    """Fused loss + gradient for one minibatch; in train mode the dropout
    masks are shared between the forward and backward passes."""
    b = batch.shape[0]
    s, caches = _model_batch(model, batch, mode, rng)
    loss, mean, var = _loss_from_scores(s, lam)
    s_bar = np.full(b, -1.0 / b)
    if lam > 0.0:
        s_bar += 2.0 * lam * (s - mean) / (b - 1)
    grads = _model_batch_backward(model, caches, s_bar)
    return loss, mean, var, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def _tree_zeros_like(params: list[dict]) -> list[dict]:
    return [{k: np.zeros_like(v) for k, v in cond.items()} for cond in params]


@dataclass
class AdamState:
    first_moment: list[dict]
    second_moment: list[dict]
    step: int = 0


def init_adam_state(params: list[dict]) -> AdamState:
    return AdamState(_tree_zeros_like(params), _tree_zeros_like(params))


def adam_step(
    state: AdamState,
    params: list[dict],
    grads: list[dict],
    learning_rate: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[AdamState, list[dict]]:
    """One Adam update with bias correction.  Arrays are updated in
    place; the (state, params) pair is returned for convenience."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for i, (cond, grad) in enumerate(zip(params, grads)):
        for key, g in grad.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(
                    f"non-finite gradient in conditioner[{i}].{key}"
                )
            m = state.first_moment[i][key]
            v = state.second_moment[i][key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            cond[key] -= learning_rate * (m / correction1) / (
                np.sqrt(v / correction2) + eps
            )
    return state, params


def _clip_global_norm(grads: list[dict], max_norm: float) -> bool:
    """Scale the whole gradient tree so its L2 norm is at most max_norm.
    Returns True when clipping fired."""
    sq = 0.0
    for cond in grads:
        for g in cond.values():
            sq += float(np.sum(g * g))
    norm = math.sqrt(sq)
    if norm <= max_norm or norm == 0.0:
        return False
    scale = max_norm / norm
    for cond in grads:
        for key in cond:
            cond[key] = cond[key] * scale
    return True


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_nll: float
    variance: float
    loss: float
    clip_events: int


def train_model(
    train: Table,
    cfg: TrainConfig,
    perm: PermutationSpec,
    pnn: PNNConfig = PNNConfig(),
    conditioner_widths: tuple[int, ...] = (64, 64),
    rng: RngStream | None = None,
) -> tuple[ARModelParams, list[EpochStats]]:
    """Train one model on a standardized, unlabeled table.

    Columns are permuted here by ``perm`` and the ordering is recorded on
    the returned model.  One RngStream drives initialization, epoch
    shuffling, and dropout, so identical inputs reproduce identical
    parameters bit for bit.
    """
    if train.n == 0:
        raise DomainError("training table is empty")
    if train.labels is not None:
        raise DomainError("training table must be unlabeled; training is label-blind")
    if perm.d != train.d:
        raise DomainError("permutation length does not match the feature count")
    if rng is None:
        rng = RngStream(cfg.seed, TRAIN_STREAM)

    model = init_ar_model(train.d, perm, pnn, conditioner_widths, cfg.dropout, rng)
    if cfg.epochs == 0:
        return model, []

    x = perm.apply_to_matrix(train.values)
    bs = batch_size(train.n, cfg)
    lam = cfg.effective_lam
    state = init_adam_state(model.conditioners)
    betas = (cfg.beta1, cfg.beta2)
    log: list[EpochStats] = []

    for epoch in range(cfg.epochs):
        order = rng.generator.permutation(train.n)
        sum_s = 0.0
        n_seen = 0
        losses: list[float] = []
        variances: list[float] = []
        clip_events = 0
        for start in range(0, train.n, bs):
            idx = order[start : start + bs]
            if idx.size < 2:
                continue  # a singleton tail cannot feed the variance term
            try:
                loss, mean, var, grads = _loss_grads(model, x[idx], lam, rng)
            except DegenerateNetworkError as err:
                raise DegenerateNetworkError(
                    f"epoch {epoch}, batch at row {start}: {err}"
                ) from err
            if _clip_global_norm(grads, cfg.grad_clip):
                clip_events += 1
            adam_step(state, model.conditioners, grads, cfg.learning_rate, betas, cfg.adam_eps)
            sum_s += mean * idx.size
            n_seen += idx.size
            losses.append(loss)
            variances.append(var)
        log.append(
            EpochStats(
                epoch=epoch,
                mean_nll=-sum_s / max(n_seen, 1),
                variance=float(np.mean(variances)) if variances else 0.0,
                loss=float(np.mean(losses)) if losses else 0.0,
                clip_events=clip_events,
            )
        )
    return model, log


def write_training_log(path, log: list[EpochStats]) -> None:
    """Comma-separated epoch log for offline plotting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_nll,variance,loss,clip_events\n")
        for row in log:
            fh.write(
                f"{row.epoch},{row.mean_nll!r},{row.variance!r},"
                f"{row.loss!r},{row.clip_events}\n"
            )
