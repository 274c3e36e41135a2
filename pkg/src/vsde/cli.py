"""Command-line surface: synthetic data, training, scoring, evaluation,
benchmarking, parameter sweeps, and the variance diagnostic.

Every command is reproducible: outputs carry no timestamps, floats are
written in shortest round-trip form, and files are replaced atomically,
so a rerun with the same config and seeds is byte-identical.

Config files are flat ``key = value`` text ('#' comments); command-line
flags override file values.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    StandardizationParams,
    Table,
    apply_standardizer,
    generate_synthetic,
    load_table,
    save_table,
)
from .density import PNNConfig
from .ensemble import (
    EnsembleConfig,
    load_ensemble,
    save_ensemble,
    score as score_ensemble,
    train_ensemble,
)
from .evaluation import (
    dolan_more,
    summary_stats,
    variance_ratio,
    write_csv,
    write_metrics,
)
from .pipeline import run_seed
from .training import TrainConfig, write_training_log

__all__ = ["RunConfig", "main"]


@dataclass(frozen=True)
class RunConfig:
    """Every knob with its benchmark-protocol default."""

    lam: float = 3.33
    learning_rate: float = 1e-4
    dropout: float = 0.1
    epochs: int = 500
    batch_min: int = 16
    batch_max: int = 8096
    grad_clip: float = 10.0
    n_perm: int = 3
    seeds: tuple[int, ...] = (0, 1, 2)
    seed: int = 0
    hidden_widths: tuple[int, ...] = (16, 16)
    conditioner_widths: tuple[int, ...] = (64, 64)
    support: tuple[float, float] = (-10.0, 10.0)
    lambda_zero: bool = False
    identity_permutation: bool = False
    mean_ensemble: bool = False

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            lam=self.lam,
            learning_rate=self.learning_rate,
            dropout=self.dropout,
            batch_min=self.batch_min,
            batch_max=self.batch_max,
            epochs=self.epochs,
            seed=self.seed if seed is None else seed,
            grad_clip=self.grad_clip,
            lambda_zero=self.lambda_zero,
        )

    def ensemble_config(self, seed: int | None = None) -> EnsembleConfig:
        return EnsembleConfig(
            n_perm=1 if self.identity_permutation else self.n_perm,
            n_seeds=len(self.seeds),
            aggregation="mean" if self.mean_ensemble else "spectral",
            include_identity_ablation=self.identity_permutation,
            train=self.train_config(seed),
        )

    def pnn_config(self) -> PNNConfig:
        return PNNConfig(self.hidden_widths, self.support)


def _parse_config_file(path: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValueError(f"{path}:{line_no}: expected 'key = value', got {text!r}")
            key, _, value = text.partition("=")
            pairs[key.strip()] = value.strip()
    return pairs


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip() != "")


def _float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip() != "")


_FIELD_PARSERS = {
    "lam": float,
    "learning_rate": float,
    "dropout": float,
    "epochs": int,
    "batch_min": int,
    "batch_max": int,
    "grad_clip": float,
    "n_perm": int,
    "seeds": _int_tuple,
    "seed": int,
    "hidden_widths": _int_tuple,
    "conditioner_widths": _int_tuple,
    "support": _float_tuple,
    "lambda_zero": lambda v: v.lower() in ("1", "true", "yes"),
    "identity_permutation": lambda v: v.lower() in ("1", "true", "yes"),
    "mean_ensemble": lambda v: v.lower() in ("1", "true", "yes"),
}


def _build_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        overrides = {}
        for key, value in _parse_config_file(args.config).items():
            if key not in _FIELD_PARSERS:
                raise ValueError(f"unknown config key {key!r}")
            overrides[key] = _FIELD_PARSERS[key](value)
        cfg = replace(cfg, **overrides)
    flag_overrides = {}
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None and value is not False:
            flag_overrides[f.name] = value
    return replace(cfg, **flag_overrides)


def _add_model_flags(parser: argparse.ArgumentParser, include_lambda: bool = True):
    d = RunConfig()
    parser.add_argument("--config", help="flat key = value config file")
    if include_lambda:
        parser.add_argument("--lambda", dest="lam", type=float, default=None,
                            help=f"variance regularization weight (default {d.lam})")
    parser.add_argument("--lambda-zero", action="store_true", default=False,
                        help="ablation: drop the variance regularizer")
    parser.add_argument("--learning-rate", type=float, default=None,
                        help=f"Adam learning rate (default {d.learning_rate})")
    parser.add_argument("--dropout", type=float, default=None,
                        help=f"conditioner dropout rate (default {d.dropout})")
    parser.add_argument("--epochs", type=int, default=None,
                        help=f"training epochs (default {d.epochs})")
    parser.add_argument("--batch-min", type=int, default=None,
                        help=f"batch size lower clamp (default {d.batch_min})")
    parser.add_argument("--batch-max", type=int, default=None,
                        help=f"batch size upper clamp (default {d.batch_max})")
    parser.add_argument("--grad-clip", type=float, default=None,
                        help=f"global gradient norm clip (default {d.grad_clip})")
    parser.add_argument("--n-perm", type=int, default=None,
                        help=f"ensemble members / permutations (default {d.n_perm})")
    parser.add_argument("--identity-permutation", action="store_true", default=False,
                        help="ablation: single member with identity feature order")
    parser.add_argument("--mean-ensemble", action="store_true", default=False,
                        help="ablation: uniform instead of spectral weights")
    parser.add_argument("--hidden-widths", type=_int_tuple, default=None,
                        help=f"CDF-net hidden widths (default {','.join(map(str, d.hidden_widths))})")
    parser.add_argument("--conditioner-widths", type=_int_tuple, default=None,
                        help=f"conditioner hidden widths (default {','.join(map(str, d.conditioner_widths))})")


def _auc_percent(value: float) -> float:
    return round(100.0 * value, 1)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    cfg = _build_run_config(args)
    table = generate_synthetic(cfg.seed)
    save_table(args.out, table)
    frac = float(np.mean(table.labels))
    print(f"wrote {args.out}: {table.n} rows, {table.d} features, "
          f"anomaly fraction {frac:.4f}, seed {cfg.seed}")
    return 0


def _cmd_train(args) -> int:
    cfg = _build_run_config(args)
    table, summary = load_table(args.data, has_labels=True)
    result = run_seed(
        table, cfg.seed, cfg.ensemble_config(), cfg.pnn_config(), cfg.conditioner_widths
    )
    out = Path(args.out)
    save_ensemble(out, result.model, extra={"seed": cfg.seed, "data": str(args.data)})
    for i, log in enumerate(result.model.training_logs):
        write_training_log(out / f"member_{i:03d}_log.csv", log)
    write_metrics(out / "train_metrics.txt", {
        "seed": cfg.seed,
        "n_train": result.n_train,
        "n_test": result.n_test,
        "train_auc_on_heldout": result.auc,
        "clamped_train": result.n_clamped_train,
        "clamped_test": result.n_clamped_test,
    })
    print(f"trained {result.model.k} members on {result.n_train} rows; "
          f"held-out AUC {result.auc:.4f}; model in {out}")
    return 0


def _cmd_score(args) -> int:
    model = load_ensemble(args.model)
    table, _ = load_table(args.data, has_labels=args.has_labels)
    if model.standardization is None:
        raise ValueError(f"{args.model}: model has no standardization parameters")
    standardized, n_clamped = apply_standardizer(model.standardization, table)
    scores, weights = score_ensemble(model, standardized)
    rows = [[i, float(s)] for i, s in enumerate(scores)]
    write_csv(args.out, ["row_index", "anomaly_score"], rows)
    print(f"scored {len(rows)} rows ({n_clamped} clamped values); "
          f"weights {np.round(weights, 4).tolist()}; wrote {args.out}")
    return 0


def _run_seeds(table: Table, cfg: RunConfig, contamination: float = 0.0):
    results = []
    for seed in cfg.seeds:
        results.append(
            run_seed(table, seed, cfg.ensemble_config(seed), cfg.pnn_config(),
                     cfg.conditioner_widths, contamination_rate=contamination)
        )
    return results


def _cmd_eval(args) -> int:
    cfg = _build_run_config(args)
    table, _ = load_table(args.data, has_labels=True)
    results = _run_seeds(table, cfg)
    aucs = np.array([r.auc for r in results])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = {"auc_mean": float(aucs.mean()), "auc_std": float(aucs.std())}
    for r in results:
        metrics[f"auc_seed_{r.seed}"] = r.auc
    for r in results:
        metrics[f"variance_ratio_seed_{r.seed}"] = r.variance_report().ratio
    write_metrics(out_dir / "eval_metrics.txt", metrics)
    rows = [[r.seed, r.auc] + [float(w) for w in r.weights] for r in results]
    write_csv(out_dir / "eval_per_seed.csv",
              ["seed", "auc"] + [f"weight_{k}" for k in range(results[0].weights.size)],
              rows)
    print(f"AUC = {_auc_percent(aucs.mean())} +- {_auc_percent(aucs.std())} "
          f"(percent, {len(cfg.seeds)} seeds) -> {out_dir / 'eval_metrics.txt'}")
    return 0


_VARIANT_FLAGS = {
    "default": {},
    "lambda_zero": {"lambda_zero": True},
    "identity_permutation": {"identity_permutation": True},
    "mean_ensemble": {"mean_ensemble": True},
}


def _cmd_bench(args) -> int:
    cfg = _build_run_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in _VARIANT_FLAGS:
            raise ValueError(f"unknown variant {v!r}; choose from {sorted(_VARIANT_FLAGS)}")
    datasets = []
    with open(args.manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            name, _, path = text.partition("=")
            datasets.append((name.strip(), path.strip()))
    if not datasets:
        raise ValueError(f"{args.manifest}: no datasets listed")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    auc = np.zeros((len(variants), len(datasets)))
    for j, (name, path) in enumerate(datasets):
        table, summary = load_table(path, has_labels=True)
        print(f"[{name}] {summary.n_rows} rows, {summary.n_features} features, "
              f"anomaly fraction {summary.anomaly_fraction:.4f}")
        for i, variant in enumerate(variants):
            vcfg = replace(cfg, **_VARIANT_FLAGS[variant])
            aucs = [r.auc for r in _run_seeds(table, vcfg)]
            auc[i, j] = float(np.mean(aucs))
            print(f"  {variant}: AUC {_auc_percent(auc[i, j])} "
                  f"+- {_auc_percent(float(np.std(aucs)))}")
    write_csv(out_dir / "auc_table.csv", ["method"] + [n for n, _ in datasets],
              [[variants[i]] + [auc[i, j] for j in range(len(datasets))]
               for i in range(len(variants))])
    thetas = np.round(np.linspace(0.5, 1.0, 51), 4)
    curves = dolan_more(auc, thetas, variants)
    write_csv(out_dir / "dolan_more.csv", ["method", "theta", "coverage"],
              [[c.method, float(t), float(cov)] for c in curves
               for t, cov in zip(c.thetas, c.coverage)])
    rows = []
    for i, variant in enumerate(variants):
        s = summary_stats(auc[i])
        rows.append([variant, s.mean, s.median, s.q1, s.q3, s.min, s.max])
    write_csv(out_dir / "summary_stats.csv",
              ["method", "mean", "median", "q1", "q3", "min", "max"], rows)
    print(f"wrote {out_dir / 'auc_table.csv'}, dolan_more.csv, summary_stats.csv")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _build_run_config(args)
    if not (args.lambda_grid or args.n_perm_grid or args.contamination_grid):
        raise ValueError("nothing to sweep: pass --lambda, --n-perm-grid, "
                         "or --contamination")
    table, _ = load_table(args.data, has_labels=True)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def mean_auc(run_cfg: RunConfig, contamination: float = 0.0) -> float:
        return float(np.mean([r.auc for r in _run_seeds(table, run_cfg, contamination)]))

    if args.lambda_grid:
        grid = list(args.lambda_grid)
        baseline = mean_auc(replace(cfg, lam=0.0))
        rows = []
        for lam in grid:
            auc = mean_auc(replace(cfg, lam=lam)) if lam != 0.0 else baseline
            rows.append([lam, auc, auc / baseline])
            print(f"lambda {lam}: AUC {_auc_percent(auc)} (x{auc / baseline:.3f} of lambda=0)")
        write_csv(out_dir / "lambda_sweep.csv",
                  ["lambda", "auc_mean", "ratio_to_lambda0"], rows)

    if args.n_perm_grid:
        baseline = mean_auc(replace(cfg, n_perm=1))
        rows = []
        for k in args.n_perm_grid:
            auc = mean_auc(replace(cfg, n_perm=int(k))) if k != 1 else baseline
            rows.append([int(k), auc, auc / baseline])
            print(f"n_perm {k}: AUC {_auc_percent(auc)} (x{auc / baseline:.3f} of single model)")
        write_csv(out_dir / "n_perm_sweep.csv",
                  ["n_perm", "auc_mean", "ratio_to_single"], rows)

    if args.contamination_grid:
        baseline = mean_auc(cfg, contamination=0.0)
        rows = []
        for rate in args.contamination_grid:
            auc = mean_auc(cfg, contamination=float(rate)) if rate else baseline
            rows.append([float(rate), auc, auc / baseline])
            print(f"contamination {rate}: AUC {_auc_percent(auc)} (x{auc / baseline:.3f} of clean)")
        write_csv(out_dir / "contamination_sweep.csv",
                  ["rate", "auc_mean", "ratio_to_clean"], rows)
    return 0


def _cmd_diagnose(args) -> int:
    cfg = _build_run_config(args)
    model = load_ensemble(args.model)
    table, _ = load_table(args.data, has_labels=True)
    if model.standardization is None:
        raise ValueError(f"{args.model}: model has no standardization parameters")
    standardized, _ = apply_standardizer(model.standardization, table)
    scores, _ = score_ensemble(model, standardized)
    report = variance_ratio(-scores, standardized.labels, cfg.seed)
    write_metrics(args.out, {
        "sigma2_normal": report.sigma2_normal,
        "sigma2_anomal": report.sigma2_anomal,
        "mu_normal": report.mu_normal,
        "mu_anomal": report.mu_anomal,
        "ratio": report.ratio,
        "subsample_size": report.subsample_size,
        "seed": report.seed,
    })
    print(f"variance ratio {report.ratio:.4f} "
          f"(normal {report.sigma2_normal:.4f} / anomalous {report.sigma2_anomal:.4f}) "
          f"-> {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vsde",
        description="Variance-stabilized density estimation for tabular anomaly detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", formatter_class=fmt,
                       help="write the two-dimensional synthetic benchmark dataset")
    p.add_argument("--seed", type=int, default=None, help="generation seed (default 0)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--config", help="flat key = value config file")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="split, standardize, train an ensemble, persist it")
    p.add_argument("--data", required=True, help="labeled CSV (last column = label)")
    p.add_argument("--out", required=True, help="output model directory")
    p.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    _add_model_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("score", formatter_class=fmt,
                       help="score a table with a persisted model")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--data", required=True, help="CSV to score")
    p.add_argument("--has-labels", action="store_true",
                   help="input carries a trailing label column (ignored for scoring)")
    p.add_argument("--out", required=True, help="output scores CSV")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="full pipeline once per seed; report mean +- std AUC")
    p.add_argument("--data", required=True, help="labeled CSV")
    p.add_argument("--out-dir", required=True, help="directory for metric files")
    p.add_argument("--seeds", type=_int_tuple, default=None, help="run seeds (default 0,1,2)")
    _add_model_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", formatter_class=fmt,
                       help="evaluate datasets from a manifest; emit AUC table and profiles")
    p.add_argument("--manifest", required=True,
                   help="text file of 'name = path' dataset lines")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", type=_int_tuple, default=None)
    p.add_argument("--variants", default="default",
                   help="comma list from: default,lambda_zero,identity_permutation,mean_ensemble")
    _add_model_flags(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("sweep", formatter_class=fmt,
                       help="grid sweeps reported as ratios to their baseline")
    p.add_argument("--data", required=True, help="labeled CSV")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", type=_int_tuple, default=None)
    p.add_argument("--lambda", dest="lambda_grid", type=_float_tuple, default=None,
                   help="comma list of regularization weights (baseline: 0)")
    p.add_argument("--n-perm-grid", type=_int_tuple, default=None,
                   help="comma list of ensemble sizes (baseline: 1)")
    p.add_argument("--contamination", dest="contamination_grid", type=_float_tuple,
                   default=None, help="comma list of training contamination rates (baseline: 0)")
    _add_model_flags(p, include_lambda=False)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("diagnose", formatter_class=fmt,
                       help="variance-ratio report for a scored labeled set")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--data", required=True, help="labeled CSV")
    p.add_argument("--out", required=True, help="output metrics file")
    p.add_argument("--seed", type=int, default=None,
                   help="seed for the balancing subsample (default 0)")
    p.add_argument("--config", help="flat key = value config file")
    p.set_defaults(func=_cmd_diagnose)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
