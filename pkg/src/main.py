"""
Command-line interface for Impatient Networks.

Commands share --config/--seed/--data/--checkpoint/--out. Values from the YAML
run configuration are overridden by flags. Logs go to stderr; every command
writes its results as files below the output directory.
"""

import functools
import math
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
import numpy as np

from src.core.config import load_run_config, settings
from src.core.exceptions import DivergenceError, ImpatientError
from src.core.logging import get_logger, setup_logging
from src.models.schemas import Criterion, DataConfig, DataKind, RunConfig, SchemeKind
from src.services.budget import weights_for
from src.services.checkpoint import load_checkpoint, normalization_from_manifest, save_checkpoint
from src.services.data import (
    SPLIT_TEST,
    Dataset,
    NormalizationStats,
    apply_normalization,
    fit_normalization,
    load_dataset,
)
from src.services.evaluator import (
    anytime_simulation,
    cascade_sweep,
    default_budgets,
    expected_accuracy_from,
    head_accuracies,
    head_kind_comparison,
    per_head_curve,
    stage_probabilities,
)
from src.services.inference import measure_costs
from src.services.network import ImpatientNet
from src.services.trainer import train_with_retry
from src.utils import reports

logger = get_logger(__name__)

IDX_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _dtype():
    return np.dtype(settings.DTYPE).type


def _find_idx(directory: Path, stem: str) -> Optional[Path]:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    return None


def resolve_data_flag(base: DataConfig, data: Optional[str]) -> DataConfig:
    """
    Apply the --data flag: "synthetic", a directory holding IDX files under
    their usual names, or a CSV file.
    """
    if data is None:
        return base
    if data == "synthetic":
        return base.model_copy(update={"kind": DataKind.SYNTHETIC})
    path = Path(data)
    if not path.exists():
        raise click.ClickException(f"data path not found: {data}")
    if path.is_dir():
        found = {key: _find_idx(path, stem) for key, stem in IDX_NAMES.items()}
        if found["train_images"] is None or found["train_labels"] is None:
            raise click.ClickException(f"{data}: no IDX training files ({IDX_NAMES['train_images']}[.gz])")
        return base.model_copy(
            update={"kind": DataKind.IDX, **{k: str(v) if v else None for k, v in found.items()}}
        )
    if path.suffix.lower() == ".csv":
        return base.model_copy(update={"kind": DataKind.CSV, "train_csv": str(path), "test_csv": None})
    raise click.ClickException(f"unsupported data source: {data}")


def load_run(config: Optional[Path], seed: Optional[int], data: Optional[str],
             checkpoint: Optional[Path], out: Optional[Path]) -> RunConfig:
    overrides: Dict[str, Any] = {
        "train.seed": seed,
        "output_dir": str(out) if out is not None else None,
        "checkpoint": str(checkpoint) if checkpoint is not None else None,
    }
    run = load_run_config(config, overrides)
    return run.model_copy(update={"data": resolve_data_flag(run.data, data)})


def _prepared_data(run: RunConfig, stats: Optional[NormalizationStats] = None) -> Tuple[Dataset, Optional[NormalizationStats]]:
    ds = load_dataset(run.data, run.train.seed)
    if stats is None and run.data.normalize:
        stats = fit_normalization(ds)
    if stats is not None:
        ds = apply_normalization(ds, stats)
    return ds, stats


def _load_for_eval(run: RunConfig) -> Tuple[ImpatientNet, Dataset]:
    path = Path(run.checkpoint_path())
    net, manifest = load_checkpoint(path, _dtype())
    ds, _ = _prepared_data(run, normalization_from_manifest(manifest))
    test = ds.split(SPLIT_TEST)
    if test.image_shape != net.input_shape:
        raise click.ClickException(
            f"checkpoint expects inputs of shape {net.input_shape}, data has {test.image_shape}"
        )
    return net, test


def common_options(func: Callable) -> Callable:
    """Flags shared by every command."""
    options = [
        click.option("--config", "config", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                     help="YAML run configuration."),
        click.option("--seed", type=int, default=None, help="Seed overriding train.seed."),
        click.option("--data", type=str, default=None,
                     help="'synthetic', a directory of IDX files, or a CSV file."),
        click.option("--checkpoint", type=click.Path(dir_okay=False, path_type=Path), default=None,
                     help="Checkpoint path (default <out>/model.ckpt)."),
        click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
                     help="Output directory."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def reported(name: str) -> Callable:
    """Log command start/finish and turn library errors into exit code 1."""

    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            logger.info("Command started", command=name)
            try:
                result = func(*args, **kwargs)
            except (ImpatientError, OSError) as e:
                logger.error("Command failed", command=name, error=str(e))
                raise click.ClickException(str(e)) from e
            logger.info("Command finished", command=name)
            return result

        return wrapper

    return decorator


@click.group()
@click.option("--log-level", default=None, help="Overrides LOG_LEVEL.")
@click.option("--log-format", type=click.Choice(["console", "json"]), default=None, help="Overrides LOG_FORMAT.")
@click.version_option(settings.APPLICATION_VERSION, prog_name=settings.APPLICATION_NAME)
def cli(log_level: Optional[str], log_format: Optional[str]) -> None:
    """Train and evaluate impatient (early-exit) networks."""
    setup_logging(log_level, log_format)


@cli.command("train")
@common_options
@click.option("--scheme", type=click.Choice([k.value for k in SchemeKind if k != SchemeKind.DENSITY]),
              default=None, help="Loss weighting scheme overriding train.scheme.kind.")
@reported("train")
def cmd_train(config, seed, data, checkpoint, out, scheme):
    """Train a network and write model.ckpt and train_log.csv."""
    run = load_run(config, seed, data, checkpoint, out)
    if scheme is not None:
        run.train.scheme = run.train.scheme.model_copy(update={"kind": SchemeKind(scheme)})

    ds, stats = _prepared_data(run)
    architecture = run.architecture.model_copy(
        update={"input_shape": ds.image_shape, "num_classes": ds.num_classes}
    )
    out_dir = Path(run.output_dir)

    def build() -> ImpatientNet:
        return ImpatientNet.build(architecture, seed=run.train.seed, dtype=_dtype())

    try:
        net, log = train_with_retry(build, ds, run.train)
    except DivergenceError as e:
        if e.log is not None:
            reports.write_train_log(e.log, out_dir / "train_log.csv")
        raise

    ckpt = save_checkpoint(net, run.checkpoint_path(), stats)
    reports.write_train_log(log, out_dir / "train_log.csv")
    reports.write_summary(out_dir / "summary.yaml", {
        "command": "train",
        "checkpoint": str(ckpt),
        "scheme": run.train.scheme.kind.value,
        "epochs": len(log.records),
        "learning_rate": log.records[-1].learning_rate,
        "final_val_accuracy": [float(a) for a in log.final_accuracy()],
        "heads_below_3x_chance": [k + 1 for k in log.heads_below(3.0, ds.num_classes)],
    })
    click.echo(str(ckpt))


@cli.command("eval")
@common_options
@reported("eval")
def cmd_eval(config, seed, data, checkpoint, out):
    """Expected accuracy on the test split for every configured scheme."""
    run = load_run(config, seed, data, checkpoint, out)
    net, test = _load_for_eval(run)
    probs = stage_probabilities(net, test, run.evaluation.batch_size)
    accuracies = head_accuracies(net, test, probs)
    cost_model = measure_costs(net)

    rows = [
        expected_accuracy_from(accuracies, weights_for(scheme, net.num_heads), scheme.kind.value, cost_model)
        for scheme in run.evaluation.schemes
    ]
    out_dir = Path(run.output_dir)
    reports.write_expected_accuracy(rows, out_dir / "expected_accuracy.csv")
    reports.write_summary(out_dir / "summary.yaml", {
        "command": "eval",
        "test_examples": len(test),
        "head_accuracies": [float(a) for a in accuracies],
        "expected_accuracy": {r.scheme: r.expected_accuracy for r in rows},
        "expected_cost_t_b": {r.scheme: r.expected_cost_t_b for r in rows},
        "expected_cost_t_a": {r.scheme: r.expected_cost_t_a for r in rows},
    })
    for r in rows:
        click.echo(f"{r.scheme}\t{r.expected_accuracy:.4f}\t{r.expected_cost_t_b:.0f}\t{r.expected_cost_t_a:.0f}")


@cli.command("costs")
@common_options
@reported("costs")
def cmd_costs(config, seed, data, checkpoint, out):
    """Per-head t_B and t_A costs in MACs (and milliseconds when enabled)."""
    run = load_run(config, seed, data, checkpoint, out)
    if run.evaluation.measure_wall_clock:
        net, test = _load_for_eval(run)
        cost_model = measure_costs(net, test.images[:run.evaluation.batch_size])
    else:
        net, _ = load_checkpoint(run.checkpoint_path(), _dtype())
        cost_model = measure_costs(net)
    path = reports.write_costs(cost_model, Path(run.output_dir) / "costs.csv")
    click.echo(str(path))


def _threshold_grid(run: RunConfig, criterion: Criterion) -> List[float]:
    grid = run.cascade.ratio_thresholds if criterion == Criterion.RATIO else run.cascade.entropy_thresholds
    if not grid:
        raise click.UsageError(f"{criterion.value} threshold grid is empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise click.UsageError(f"{criterion.value} thresholds must be sorted ascending")
    if any(math.isnan(t) for t in grid):
        raise click.UsageError(f"{criterion.value} thresholds must not be NaN")
    return grid


@cli.command("cascade")
@common_options
@click.option("--criterion", "criteria", multiple=True, type=click.Choice([c.value for c in Criterion]),
              help="Stopping criteria to sweep (repeatable); default from config.")
@reported("cascade")
def cmd_cascade(config, seed, data, checkpoint, out, criteria):
    """Per-head curve and cascade threshold sweeps."""
    run = load_run(config, seed, data, checkpoint, out)
    selected = [Criterion(c) for c in criteria] or run.cascade.criteria
    grids = {criterion: _threshold_grid(run, criterion) for criterion in selected}

    net, test = _load_for_eval(run)
    probs = stage_probabilities(net, test, run.evaluation.batch_size)
    calibration = test.images[:run.evaluation.batch_size] if run.evaluation.measure_wall_clock else None
    cost_model = measure_costs(net, calibration)

    out_dir = Path(run.output_dir)
    reports.write_curve(per_head_curve(net, test, cost_model, probs), out_dir / "curve_per_head.csv")
    for criterion, grid in grids.items():
        curve = cascade_sweep(net, test, criterion, grid, cost_model, probs)
        reports.write_curve(curve, out_dir / f"curve_cascade_{criterion.value}.csv")
    click.echo(str(out_dir))


@cli.command("anytime-sim")
@common_options
@reported("anytime-sim")
def cmd_anytime(config, seed, data, checkpoint, out):
    """Accuracy per budget in a-priori and anytime mode."""
    run = load_run(config, seed, data, checkpoint, out)
    net, test = _load_for_eval(run)
    probs = stage_probabilities(net, test, run.evaluation.batch_size)
    cost_model = measure_costs(net)
    budgets = run.anytime.budgets or default_budgets(cost_model, run.anytime.num_points)
    points = anytime_simulation(net, test, budgets, cost_model, probs,
                                check_examples=run.anytime.check_examples)
    path = reports.write_anytime(points, Path(run.output_dir) / "anytime.csv")
    click.echo(str(path))


@cli.command("compare-heads")
@common_options
@reported("compare-heads")
def cmd_compare_heads(config, seed, data, checkpoint, out):
    """Train one network per head variant and compare per-head validation accuracy."""
    run = load_run(config, seed, data, checkpoint, out)
    ds, _ = _prepared_data(run)
    run.architecture = run.architecture.model_copy(
        update={"input_shape": ds.image_shape, "num_classes": ds.num_classes}
    )
    results = head_kind_comparison(ds, run, dtype=_dtype())
    path = reports.write_head_kinds(results, Path(run.output_dir) / "head_kinds.csv")
    click.echo(str(path))


def main() -> None:
    cli(prog_name="impatient")


if __name__ == "__main__":
    main()
