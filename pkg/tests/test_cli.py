"""End-to-end tests of the command-line interface on a tiny synthetic run."""

import logging

import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from src.main import cli

TINY_RUN = {
    "data": {
        "kind": "synthetic",
        "n_per_class": 6,
        "test_per_class": 3,
        "image_size": 8,
        "num_coarse": 2,
        "num_fine": 2,
        "val_fraction": 0.2,
    },
    "architecture": {"channels": [4, 4]},
    "train": {"epochs": 2, "batch_size": 8},
}


@pytest.fixture(autouse=True)
def detach_log_handlers():
    yield
    logging.getLogger().handlers.clear()


@pytest.fixture
def runner():
    return CliRunner()


def write_config(tmp_path, **sections):
    config = {key: dict(value) for key, value in TINY_RUN.items()}
    for key, value in sections.items():
        config.setdefault(key, {}).update(value)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(config))
    return path


def invoke(runner, *args):
    return runner.invoke(cli, ["--log-level", "WARNING", *[str(a) for a in args]])


@pytest.fixture
def trained(runner, tmp_path):
    config = write_config(tmp_path)
    out = tmp_path / "run"
    result = invoke(runner, "train", "--config", config, "--out", out)
    assert result.exit_code == 0, result.output
    return config, out


class TestTrain:

    def test_writes_checkpoint_and_log(self, trained):
        _, out = trained
        assert (out / "model.ckpt").exists()
        log = pd.read_csv(out / "train_log.csv")
        assert len(log) == 2
        assert [c for c in log.columns if c.startswith("val_acc_head_")] == ["val_acc_head_1", "val_acc_head_2"]
        summary = yaml.safe_load((out / "summary.yaml").read_text())
        assert summary["epochs"] == 2

    def test_rerun_is_byte_identical(self, runner, trained, tmp_path):
        config, out = trained
        again = tmp_path / "again"
        assert invoke(runner, "train", "--config", config, "--out", again).exit_code == 0
        assert (out / "model.ckpt").read_bytes() == (again / "model.ckpt").read_bytes()
        assert (out / "train_log.csv").read_bytes() == (again / "train_log.csv").read_bytes()

    def test_seed_flag_changes_the_run(self, runner, trained, tmp_path):
        config, out = trained
        other = tmp_path / "other"
        assert invoke(runner, "train", "--config", config, "--out", other, "--seed", 1).exit_code == 0
        assert (out / "model.ckpt").read_bytes() != (other / "model.ckpt").read_bytes()

    def test_scheme_flag(self, runner, tmp_path):
        out = tmp_path / "std"
        result = invoke(runner, "train", "--config", write_config(tmp_path), "--out", out, "--scheme", "std")
        assert result.exit_code == 0
        assert yaml.safe_load((out / "summary.yaml").read_text())["scheme"] == "std"

    def test_missing_data_path(self, runner, tmp_path):
        out = tmp_path / "run"
        result = invoke(runner, "train", "--config", write_config(tmp_path), "--out", out,
                        "--data", tmp_path / "nowhere")
        assert result.exit_code != 0
        assert not (out / "model.ckpt").exists()

    def test_invalid_config(self, runner, tmp_path):
        config = write_config(tmp_path, train={"epochs": 0})
        result = invoke(runner, "train", "--config", config, "--out", tmp_path / "run")
        assert result.exit_code == 1

    def test_divergence_exits_with_error(self, runner, tmp_path):
        out = tmp_path / "run"
        config = write_config(tmp_path, train={"learning_rate": 1e6, "retries": 0})
        result = invoke(runner, "train", "--config", config, "--out", out)
        assert result.exit_code == 1
        assert not (out / "model.ckpt").exists()
        assert (out / "train_log.csv").exists()


class TestEvaluation:

    def test_eval(self, runner, trained):
        config, out = trained
        assert invoke(runner, "eval", "--config", config, "--out", out).exit_code == 0
        table = pd.read_csv(out / "expected_accuracy.csv")
        assert list(table["scheme"]) == ["eq", "lin", "poly", "ilin", "ipoly", "norm"]
        assert table["expected_accuracy"].between(0, 1).all()

    def test_std_row_is_final_head_accuracy(self, runner, trained, tmp_path):
        _, out = trained
        config = write_config(tmp_path, evaluation={"schemes": [{"kind": "std"}, {"kind": "eq"}]})
        assert invoke(runner, "eval", "--config", config, "--out", out).exit_code == 0
        table = pd.read_csv(out / "expected_accuracy.csv")
        assert list(table["scheme"]) == ["std", "eq"]
        assert table["expected_accuracy"].iloc[0] == pytest.approx(table["acc_head_2"].iloc[0])

        assert invoke(runner, "costs", "--config", config, "--out", out).exit_code == 0
        costs = pd.read_csv(out / "costs.csv")
        assert table["expected_cost_t_b"].iloc[0] == costs["t_b_macs"].iloc[-1]
        assert table["expected_cost_t_a"].iloc[0] == costs["t_a_macs"].iloc[-1]
        assert table["expected_cost_t_b"].iloc[1] == pytest.approx(costs["t_b_macs"].mean())

    def test_eval_is_deterministic(self, runner, trained):
        config, out = trained
        invoke(runner, "eval", "--config", config, "--out", out)
        first = (out / "expected_accuracy.csv").read_bytes()
        invoke(runner, "eval", "--config", config, "--out", out)
        assert (out / "expected_accuracy.csv").read_bytes() == first

    def test_missing_checkpoint(self, runner, tmp_path):
        result = invoke(runner, "eval", "--config", write_config(tmp_path), "--out", tmp_path / "empty")
        assert result.exit_code == 1

    def test_costs(self, runner, trained):
        config, out = trained
        assert invoke(runner, "costs", "--config", config, "--out", out).exit_code == 0
        costs = pd.read_csv(out / "costs.csv")
        assert list(costs["head"]) == [1, 2]
        assert (costs["t_a_macs"] >= costs["t_b_macs"]).all()

    def test_cascade_endpoints_match_per_head_curve(self, runner, trained):
        config, out = trained
        result = invoke(runner, "cascade", "--config", config, "--out", out, "--criterion", "ratio")
        assert result.exit_code == 0
        per_head = pd.read_csv(out / "curve_per_head.csv")
        sweep = pd.read_csv(out / "curve_cascade_ratio.csv")
        assert sweep["cost_macs"].iloc[0] == per_head["cost_macs"].iloc[0]
        assert sweep["accuracy"].iloc[0] == per_head["accuracy"].iloc[0]
        assert sweep["cost_macs"].iloc[-1] == per_head["cost_macs"].iloc[-1]
        assert sweep["accuracy"].iloc[-1] == per_head["accuracy"].iloc[-1]
        assert sweep["cost_macs"].is_monotonic_increasing

    def test_both_criteria(self, runner, trained):
        config, out = trained
        result = invoke(runner, "cascade", "--config", config, "--out", out,
                        "--criterion", "ratio", "--criterion", "entropy")
        assert result.exit_code == 0
        assert (out / "curve_cascade_ratio.csv").exists()
        assert (out / "curve_cascade_entropy.csv").exists()

    def test_empty_threshold_grid_is_a_usage_error(self, runner, tmp_path):
        config = write_config(tmp_path, cascade={"ratio_thresholds": []})
        result = invoke(runner, "cascade", "--config", config, "--out", tmp_path / "run", "--criterion", "ratio")
        assert result.exit_code == 2

    def test_unsorted_threshold_grid_is_a_usage_error(self, runner, tmp_path):
        config = write_config(tmp_path, cascade={"entropy_thresholds": [0.5, 0.1]})
        result = invoke(runner, "cascade", "--config", config, "--out", tmp_path / "run", "--criterion", "entropy")
        assert result.exit_code == 2

    def test_anytime_sim(self, runner, trained):
        config, out = trained
        assert invoke(runner, "anytime-sim", "--config", config, "--out", out).exit_code == 0
        table = pd.read_csv(out / "anytime.csv")
        assert len(table) == 20
        assert (table["head_a_priori"] >= table["head_anytime"]).all()
        assert table["agreement"].between(0, 1).all()


class TestCompareHeads:

    def test_reports_every_variant(self, runner, tmp_path):
        config = write_config(tmp_path, train={"epochs": 1})
        out = tmp_path / "heads"
        assert invoke(runner, "compare-heads", "--config", config, "--out", out).exit_code == 0
        table = pd.read_csv(out / "head_kinds.csv", keep_default_na=False)
        assert list(table["head_kind"]) == ["fc_only", "avg", "avg4x4"]
        assert (table["error"] == "").all()
        assert table["val_acc_head_2"].astype(str).str.len().gt(0).all()
