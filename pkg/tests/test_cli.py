import numpy as np
import pytest

from vsde.cli import RunConfig, _parse_config_file, main
from vsde.data import load_table


@pytest.fixture(scope="module")
def synth_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "synth.csv"
    assert main(["synth", "--seed", "7", "--out", str(path)]) == 0
    return path


FAST = ["--epochs", "4"]


class TestSynth:
    def test_writes_benchmark_dataset(self, synth_csv):
        table, summary = load_table(synth_csv, has_labels=True)
        assert (summary.n_rows, summary.n_features) == (340, 2)
        assert int(np.sum(table.labels)) == 40

    def test_deterministic_output(self, tmp_path, synth_csv):
        other = tmp_path / "again.csv"
        assert main(["synth", "--seed", "7", "--out", str(other)]) == 0
        assert other.read_bytes() == synth_csv.read_bytes()


class TestPipelineCommands:
    def test_train_score_eval(self, synth_csv, tmp_path):
        model_dir = tmp_path / "model"
        assert main(["train", "--data", str(synth_csv), "--out", str(model_dir), *FAST]) == 0
        assert (model_dir / "manifest.json").exists()
        assert (model_dir / "standardization.txt").exists()
        assert (model_dir / "member_000_log.csv").exists()

        scores_csv = tmp_path / "scores.csv"
        assert main(["score", "--model", str(model_dir), "--data", str(synth_csv),
                     "--has-labels", "--out", str(scores_csv)]) == 0
        lines = scores_csv.read_text().strip().splitlines()
        assert lines[0] == "row_index,anomaly_score"
        assert len(lines) == 341

        out_dir = tmp_path / "eval"
        assert main(["eval", "--data", str(synth_csv), "--out-dir", str(out_dir),
                     "--seeds", "0,1", *FAST]) == 0
        metrics = dict(
            line.split(" = ") for line in
            (out_dir / "eval_metrics.txt").read_text().strip().splitlines()
        )
        assert 0.0 <= float(metrics["auc_mean"]) <= 1.0
        assert "auc_seed_0" in metrics and "auc_seed_1" in metrics

    def test_diagnose(self, synth_csv, tmp_path):
        model_dir = tmp_path / "model"
        main(["train", "--data", str(synth_csv), "--out", str(model_dir), *FAST])
        report = tmp_path / "diag.txt"
        assert main(["diagnose", "--model", str(model_dir), "--data", str(synth_csv),
                     "--out", str(report)]) == 0
        text = report.read_text()
        for key in ("sigma2_normal", "sigma2_anomal", "ratio", "subsample_size"):
            assert key in text

    def test_sweep_lambda_ratio_table(self, synth_csv, tmp_path):
        out_dir = tmp_path / "sweep"
        assert main(["sweep", "--data", str(synth_csv), "--out-dir", str(out_dir),
                     "--seeds", "0", "--lambda", "0,3.33", *FAST]) == 0
        lines = (out_dir / "lambda_sweep.csv").read_text().strip().splitlines()
        assert lines[0] == "lambda,auc_mean,ratio_to_lambda0"
        assert len(lines) == 3
        base = lines[1].split(",")
        assert float(base[2]) == 1.0  # the baseline's ratio to itself

    def test_bench_outputs(self, synth_csv, tmp_path):
        manifest = tmp_path / "manifest.txt"
        manifest.write_text(f"synthetic = {synth_csv}\n")
        out_dir = tmp_path / "bench"
        assert main(["bench", "--manifest", str(manifest), "--out-dir", str(out_dir),
                     "--seeds", "0", "--variants", "default,mean_ensemble", *FAST]) == 0
        for name in ("auc_table.csv", "dolan_more.csv", "summary_stats.csv"):
            assert (out_dir / name).exists()
        table = (out_dir / "auc_table.csv").read_text().strip().splitlines()
        assert table[0] == "method,synthetic"
        assert len(table) == 3


class TestDeterminism:
    def test_eval_rerun_byte_identical(self, synth_csv, tmp_path):
        args = ["eval", "--data", str(synth_csv), "--seeds", "0", *FAST]
        main([*args, "--out-dir", str(tmp_path / "a")])
        main([*args, "--out-dir", str(tmp_path / "b")])
        for name in ("eval_metrics.txt", "eval_per_seed.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestConfigHandling:
    def test_config_file_applies_and_flags_win(self, synth_csv, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text("epochs = 4\nn_perm = 2  # comment\nseed = 3\n")
        model_dir = tmp_path / "model"
        assert main(["train", "--data", str(synth_csv), "--out", str(model_dir),
                     "--config", str(config), "--n-perm", "1"]) == 0
        import json

        manifest = json.loads((model_dir / "manifest.json").read_text())
        assert manifest["n_members"] == 1  # the flag beat the file

    def test_unknown_config_key_rejected(self, synth_csv, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text("bogus = 1\n")
        code = main(["train", "--data", str(synth_csv), "--out", str(tmp_path / "m"),
                     "--config", str(config)])
        assert code != 0

    def test_defaults_match_protocol(self):
        cfg = RunConfig()
        assert cfg.lam == 3.33
        assert cfg.learning_rate == 1e-4
        assert cfg.dropout == 0.1
        assert cfg.n_perm == 3
        assert cfg.seeds == (0, 1, 2)
        assert (cfg.batch_min, cfg.batch_max) == (16, 8096)

    def test_parse_config_file(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\nlam = 1.5\nseeds = 0,4\n\n")
        assert _parse_config_file(path) == {"lam": "1.5", "seeds": "0,4"}


class TestErrorPaths:
    def test_missing_file_nonzero_exit(self, tmp_path):
        assert main(["eval", "--data", str(tmp_path / "nope.csv"),
                     "--out-dir", str(tmp_path)]) != 0

    def test_unknown_command_exits_nonzero(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code != 0

    def test_help_lists_defaults(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--lambda", "--epochs", "--dropout", "--n-perm", "--seeds",
                     "--learning-rate", "--mean-ensemble"):
            assert flag in text

    def test_sweep_without_grids_fails(self, synth_csv, tmp_path):
        assert main(["sweep", "--data", str(synth_csv),
                     "--out-dir", str(tmp_path)]) != 0
