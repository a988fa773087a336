"""
Report writers for training logs, cost models, curves and summaries.

CSV files are written through pandas with a fixed float format and "\n" line
endings so that identical inputs produce identical bytes.
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd
import yaml

from src.core.logging import get_logger
from src.models.schemas import (
    AnytimePoint,
    CostModel,
    ExpectedAccuracyReport,
    HeadKindResult,
    TimeAccuracyCurve,
    TrainLog,
)

logger = get_logger(__name__)

FLOAT_FORMAT = "%.10g"

PathLike = Union[str, Path]


def write_csv(path: PathLike, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(columns))
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.debug("Wrote CSV", path=str(path), rows=len(frame))
    return path


def write_train_log(log: TrainLog, path: PathLike) -> Path:
    return write_csv(path, log.columns(), log.rows())


def write_expected_accuracy(reports: Sequence[ExpectedAccuracyReport], path: PathLike) -> Path:
    num_heads = len(reports[0].head_accuracies) if reports else 0
    columns = (
        ["scheme", "expected_accuracy", "expected_cost_t_b", "expected_cost_t_a"]
        + [f"weight_head_{k + 1}" for k in range(num_heads)]
        + [f"acc_head_{k + 1}" for k in range(num_heads)]
    )
    rows = [
        [r.scheme, r.expected_accuracy, r.expected_cost_t_b, r.expected_cost_t_a, *r.weights, *r.head_accuracies]
        for r in reports
    ]
    return write_csv(path, columns, rows)


def write_costs(cost_model: CostModel, path: PathLike) -> Path:
    columns = ["head", "prefix_macs", "head_macs", "t_b_macs", "t_a_macs", "t_b_ms", "t_a_ms"]
    rows = []
    for k in range(cost_model.num_heads):
        rows.append([
            k + 1,
            cost_model.prefix_costs[k],
            cost_model.head_costs[k],
            cost_model.t_b[k],
            cost_model.t_a[k],
            cost_model.t_b_ms[k] if cost_model.t_b_ms else None,
            cost_model.t_a_ms[k] if cost_model.t_a_ms else None,
        ])
    return write_csv(path, columns, rows)


def write_curve(curve: TimeAccuracyCurve, path: PathLike) -> Path:
    columns = ["cost_macs", "cost_ms", "accuracy", "threshold_or_head"]
    rows = [[p.cost_macs, p.cost_ms, p.accuracy, p.threshold_or_head] for p in curve.points]
    return write_csv(path, columns, rows)


def write_anytime(points: Sequence[AnytimePoint], path: PathLike) -> Path:
    columns = ["budget_macs", "head_a_priori", "accuracy_a_priori", "head_anytime", "accuracy_anytime", "agreement"]
    rows = [
        [p.budget, p.head_a_priori, p.accuracy_a_priori, p.head_anytime, p.accuracy_anytime, p.agreement]
        for p in points
    ]
    return write_csv(path, columns, rows)


def write_head_kinds(results: Sequence[HeadKindResult], path: PathLike) -> Path:
    num_heads = max((len(r.val_accuracy) for r in results if r.val_accuracy), default=0)
    columns = ["head_kind"] + [f"val_acc_head_{k + 1}" for k in range(num_heads)] + ["error"]
    rows: List[List[Any]] = []
    for r in results:
        accuracies: List[Optional[float]] = list(r.val_accuracy or [])
        accuracies += [None] * (num_heads - len(accuracies))
        rows.append([r.head_kind.value, *accuracies, r.error or ""])
    return write_csv(path, columns, rows)


def write_summary(path: PathLike, summary: Dict[str, Any]) -> Path:
    """Compact human-readable summary in YAML."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        yaml.safe_dump(summary, f, sort_keys=False, default_flow_style=False)
    return path
