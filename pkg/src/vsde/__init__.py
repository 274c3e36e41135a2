"""Variance-stabilized density estimation for tabular anomaly detection.

A monotone-network autoregressive density model trained under a
variance-regularized negative log-likelihood, scored through a spectral
ensemble over feature permutations, with evaluation and diagnostic
tooling and a command-line interface (``vsde``).
"""

from .data import (
    PermutationSpec,
    SplitSpec,
    StandardizationParams,
    Table,
    apply_permutation,
    apply_standardizer,
    fit_apply_standardizer,
    fit_standardizer,
    generate_synthetic,
    inject_contamination,
    load_table,
    sample_permutations,
    save_table,
    split_5050,
)
from .density import (
    ARModelParams,
    MonotoneNetParams,
    PNNConfig,
    batch_log_density,
    conditional_log_density,
    conditioner_forward,
    grad_log_density,
    init_ar_model,
    load_model,
    model_log_density,
    monotone_forward,
    normalized_cdf,
    positive_transform,
    save_model,
)
from .ensemble import (
    EnsembleConfig,
    EnsembleModel,
    ScoreMatrix,
    aggregate,
    load_ensemble,
    save_ensemble,
    score,
    score_matrix,
    spectral_weights,
    train_ensemble,
)
from .evaluation import (
    ProfileCurve,
    SummaryStats,
    VarianceRatioReport,
    dolan_more,
    roc_auc,
    summary_stats,
    variance_ratio,
)
from .numerics import (
    RngStream,
    finite_diff_check,
    leading_eigenvector,
    sample_covariance,
    softmax,
    stable_sigmoid,
)
from .pipeline import SeedRunResult, run_seed
from .training import (
    AdamState,
    TrainConfig,
    adam_step,
    batch_size,
    init_adam_state,
    train_model,
    vsde_batch_loss,
)

__version__ = "0.1.0"
