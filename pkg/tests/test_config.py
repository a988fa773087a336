"""Tests for settings and run configuration loading."""

import pytest

from src.core.config import Settings, load_run_config
from src.core.exceptions import ConfigurationError
from src.models.schemas import HeadKind, RunConfig, SchemeKind, TrainConfig


class TestSettings:

    def test_defaults(self, monkeypatch):
        monkeypatch.delenv("LOG_LEVEL", raising=False)
        monkeypatch.delenv("DTYPE", raising=False)
        current = Settings(_env_file=None)
        assert current.LOG_LEVEL == "INFO"
        assert current.DTYPE == "float32"

    def test_environment_override(self, monkeypatch):
        monkeypatch.setenv("LOG_LEVEL", "debug")
        monkeypatch.setenv("LOG_FORMAT", "JSON")
        current = Settings(_env_file=None)
        assert current.LOG_LEVEL == "DEBUG"
        assert current.LOG_FORMAT == "json"

    def test_invalid_dtype(self, monkeypatch):
        monkeypatch.setenv("DTYPE", "float16")
        with pytest.raises(ValueError):
            Settings(_env_file=None)


class TestRunConfig:

    def test_defaults_without_file(self):
        run = load_run_config()
        assert run.train.scheme.kind == SchemeKind.EQ
        assert run.output_dir.endswith("/default")
        assert run.checkpoint_path() == f"{run.output_dir}/model.ckpt"

    def test_yaml_values(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(
            "train:\n  epochs: 3\n  scheme: {kind: ipoly, gamma: 3.0}\n"
            "architecture:\n  head_kind: avg4x4\n"
        )
        run = load_run_config(path)
        assert run.train.epochs == 3
        assert run.train.scheme.kind == SchemeKind.IPOLY
        assert run.train.scheme.gamma == 3.0
        assert run.architecture.head_kind == HeadKind.AVG4X4

    def test_overrides_win_and_none_is_skipped(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("output_dir: from_file\ntrain:\n  seed: 4\n")
        run = load_run_config(path, {"train.seed": 9, "output_dir": None, "checkpoint": "x.ckpt"})
        assert run.train.seed == 9
        assert run.output_dir == "from_file"
        assert run.checkpoint_path() == "x.ckpt"

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert isinstance(load_run_config(path), RunConfig)

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("train: [unclosed\n")
        with pytest.raises(ConfigurationError):
            load_run_config(path)

    def test_non_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigurationError):
            load_run_config(path)

    def test_schema_violation(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("train:\n  scheme: {kind: density}\n")
        with pytest.raises(ConfigurationError):
            load_run_config(path)

    def test_generated_backbone_follows_batchnorm_switch(self):
        run = RunConfig(train=TrainConfig(batchnorm=False))
        assert run.architecture.batchnorm is False
        assert all(spec.type.value != "batchnorm" for spec in run.architecture.resolved_layers())

    def test_learning_rate_default_depends_on_batchnorm(self):
        assert TrainConfig().effective_learning_rate == 0.01
        assert TrainConfig(batchnorm=False).effective_learning_rate == 1e-4

    def test_batchnorm_needs_batches_of_two(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)
