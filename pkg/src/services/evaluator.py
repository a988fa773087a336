"""
Evaluation of impatient networks: expected accuracy under a budget
distribution, time-accuracy curves and cascade threshold sweeps.

Every function accepts precomputed (K, N, C) probabilities so that one
forward pass over the test set can serve several reports.
"""

from typing import List, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from src.core.exceptions import BudgetError, ConfigurationError, DataFormatError
from src.core.logging import get_logger
from src.models.schemas import (
    AnytimePoint,
    CascadePolicy,
    CostModel,
    Criterion,
    CurvePoint,
    ExpectedAccuracyReport,
    HeadKind,
    HeadKindResult,
    RunConfig,
    TimeAccuracyCurve,
)
from src.services.budget import BudgetDensity, ExitSchedule, WeightScheme, scheme_weights, validate_weights
from src.services.data import Dataset
from src.services.inference import (
    cascade_stop_index,
    predict_anytime,
    predict_with_budget,
    select_head_for_budget,
    select_head_for_interrupt,
)
from src.services.network import ImpatientNet, fit_grid_heads
from src.services.trainer import train

logger = get_logger(__name__)


def stage_probabilities(net: ImpatientNet, test_set: Dataset, batch_size: int = 256) -> np.ndarray:
    if len(test_set) == 0:
        raise DataFormatError("test set is empty")
    return net.predict_proba(test_set.images, batch_size)


def _probabilities(net, test_set, probabilities, batch_size) -> np.ndarray:
    if probabilities is not None:
        if probabilities.shape[1] == 0:
            raise DataFormatError("test set is empty")
        return probabilities
    return stage_probabilities(net, test_set, batch_size)


def head_accuracies(
    net: ImpatientNet,
    test_set: Dataset,
    probabilities: Optional[np.ndarray] = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Accuracy a_k of every head; ties in argmax go to the lowest class index."""
    probs = _probabilities(net, test_set, probabilities, batch_size)
    return (probs.argmax(axis=-1) == test_set.labels[None, :]).mean(axis=1)


def expected_accuracy_from(
    accuracies: Sequence[float],
    weights: Sequence[float],
    name: str,
    cost_model: Optional[CostModel] = None,
) -> ExpectedAccuracyReport:
    """Weighted accuracy and, given a cost model, the weighted t_B and t_A costs."""
    a = np.asarray(accuracies, dtype=np.float64)
    w = validate_weights(weights, len(a))
    cost_t_b = cost_t_a = None
    if cost_model is not None:
        if cost_model.num_heads != len(a):
            raise BudgetError(f"cost model has {cost_model.num_heads} heads, expected {len(a)}")
        cost_t_b = float(np.dot(w, np.asarray(cost_model.t_b, dtype=np.float64)))
        cost_t_a = float(np.dot(w, np.asarray(cost_model.t_a, dtype=np.float64)))
    return ExpectedAccuracyReport(
        scheme=name,
        head_accuracies=a.tolist(),
        weights=w.tolist(),
        expected_accuracy=float(np.dot(w, a)),
        expected_cost_t_b=cost_t_b,
        expected_cost_t_a=cost_t_a,
    )


def expected_accuracy(
    net: ImpatientNet,
    test_set: Dataset,
    scheme: Union[WeightScheme, Sequence[float]],
    probabilities: Optional[np.ndarray] = None,
    batch_size: int = 256,
    name: Optional[str] = None,
    cost_model: Optional[CostModel] = None,
) -> ExpectedAccuracyReport:
    """
    Budget-weighted accuracy sum_k w_k a_k, with weighted costs when a cost model is given.

    Args:
        net: trained network
        test_set: held-out examples
        scheme: weighting scheme, or an explicit weight vector
        probabilities: precomputed stage probabilities for test_set
        batch_size: evaluation chunk size
        name: report label; defaults to the scheme name
        cost_model: adds sum_k w_k t_B(k) and sum_k w_k t_A(k) to the report

    Raises:
        DataFormatError: empty test set
    """
    accuracies = head_accuracies(net, test_set, probabilities, batch_size)
    if isinstance(scheme, WeightScheme):
        weights = scheme_weights(scheme)
        name = name or scheme.name
    else:
        weights = np.asarray(scheme, dtype=np.float64)
        name = name or "custom"
    return expected_accuracy_from(accuracies, weights, name, cost_model)


def per_head_curve(
    net: ImpatientNet,
    test_set: Dataset,
    cost_model: CostModel,
    probabilities: Optional[np.ndarray] = None,
    batch_size: int = 256,
) -> TimeAccuracyCurve:
    """One point (t_A(k), a_k) per head."""
    accuracies = head_accuracies(net, test_set, probabilities, batch_size)
    points = [
        CurvePoint(
            cost_macs=float(cost_model.t_a[k]),
            cost_ms=cost_model.t_a_ms[k] if cost_model.t_a_ms else None,
            accuracy=float(accuracies[k]),
            threshold_or_head=float(k + 1),
        )
        for k in range(cost_model.num_heads)
    ]
    return TimeAccuracyCurve(source="per_head", points=points)


def cascade_sweep(
    net: ImpatientNet,
    test_set: Dataset,
    criterion: Criterion,
    thresholds: Sequence[float],
    cost_model: CostModel,
    probabilities: Optional[np.ndarray] = None,
    batch_size: int = 256,
) -> TimeAccuracyCurve:
    """
    Mean t_A cost and accuracy of the cascade at every threshold.

    Raises:
        ConfigurationError: empty, unsorted or out-of-range thresholds
    """
    if not thresholds:
        raise ConfigurationError("threshold grid is empty")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigurationError("thresholds must be sorted ascending")
    probs = _probabilities(net, test_set, probabilities, batch_size)
    t_a = np.asarray(cost_model.t_a, dtype=np.float64)
    t_a_ms = np.asarray(cost_model.t_a_ms) if cost_model.t_a_ms else None
    columns = np.arange(probs.shape[1])

    points: List[CurvePoint] = []
    for threshold in thresholds:
        try:
            policy = CascadePolicy(criterion=criterion, threshold=threshold)
        except ValidationError as e:
            raise ConfigurationError(f"invalid {criterion.value} threshold {threshold}: {e}") from e
        stops = cascade_stop_index(probs, policy)
        predictions = probs[stops, columns].argmax(axis=-1)
        points.append(
            CurvePoint(
                cost_macs=float(t_a[stops].mean()),
                cost_ms=float(t_a_ms[stops].mean()) if t_a_ms is not None else None,
                accuracy=float((predictions == test_set.labels).mean()),
                threshold_or_head=float(threshold),
            )
        )
    logger.debug("Cascade sweep", criterion=criterion.value, points=len(points))
    return TimeAccuracyCurve(source="cascade_sweep", criterion=criterion, points=points)


def sampled_expected_accuracy(
    accuracies: Sequence[float],
    density: BudgetDensity,
    schedule: ExitSchedule,
    n: int = 100_000,
    seed: int = 0,
) -> float:
    """
    Monte-Carlo estimate of the expected accuracy: draw budgets, answer with
    the latest head whose exit time has been reached. Budgets before the
    first exit are discarded, matching the renormalized closed form.
    """
    a = np.asarray(accuracies, dtype=np.float64)
    if len(a) != len(schedule):
        raise BudgetError(f"{len(a)} accuracies for {len(schedule)} exits")
    budgets = density.sample(n, np.random.default_rng(seed))
    heads = np.searchsorted(np.asarray(schedule.times), budgets, side="right") - 1
    heads = heads[heads >= 0]
    if heads.size == 0:
        raise BudgetError("no sampled budget reaches the first exit")
    return float(a[heads].mean())


def anytime_simulation(
    net: ImpatientNet,
    test_set: Dataset,
    budgets: Sequence[float],
    cost_model: CostModel,
    probabilities: Optional[np.ndarray] = None,
    batch_size: int = 256,
    check_examples: int = 0,
) -> List[AnytimePoint]:
    """
    Accuracy at each budget when the budget is known in advance (t_B) and
    when the run is interrupted at that budget (t_A).

    With check_examples > 0 the first test examples are also run one at a
    time through predict_with_budget and predict_anytime; each point records
    the share whose head and class match the staged probabilities.

    Raises:
        BudgetError: a budget below the cost of the first head
    """
    probs = _probabilities(net, test_set, probabilities, batch_size)
    accuracies = head_accuracies(net, test_set, probs)
    checked = test_set.images[:check_examples]
    points = []
    for budget in budgets:
        k_b = select_head_for_budget(budget, cost_model.t_b)
        k_a = select_head_for_interrupt(budget, cost_model.t_a)
        agreement = None
        if len(checked):
            agreement = _agreement(net, checked, probs, budget, cost_model, k_b, k_a)
            if agreement < 1.0:
                logger.warning("Single-example inference disagrees with staged heads",
                               budget=float(budget), agreement=agreement)
        points.append(
            AnytimePoint(
                budget=float(budget),
                head_a_priori=k_b + 1,
                accuracy_a_priori=float(accuracies[k_b]),
                head_anytime=k_a + 1,
                accuracy_anytime=float(accuracies[k_a]),
                agreement=agreement,
            )
        )
    return points


def _agreement(net, images, probs, budget, cost_model, k_b, k_a) -> float:
    matches = 0
    for i, image in enumerate(images):
        a_priori = predict_with_budget(net, image, budget, cost_model)
        anytime = predict_anytime(net, image, budget, cost_model)
        matches += (
            a_priori.head_index == k_b + 1
            and a_priori.predicted_class == int(probs[k_b, i].argmax())
            and anytime.head_index == k_a + 1
            and anytime.predicted_class == int(probs[k_a, i].argmax())
        )
    return matches / len(images)


def default_budgets(cost_model: CostModel, num_points: int) -> List[float]:
    """Evenly spaced budgets from the first head's cost to the full anytime cost."""
    return np.linspace(cost_model.t_b[0], cost_model.t_a[-1], num_points).tolist()


def head_kind_comparison(
    data: Dataset,
    run: RunConfig,
    kinds: Sequence[HeadKind] = (HeadKind.FC_ONLY, HeadKind.AVG, HeadKind.AVG4X4),
    dtype=np.float32,
) -> List[HeadKindResult]:
    """
    Train one network per head variant with otherwise identical settings and
    report the final per-head validation accuracy. The AVG4x4 variant falls
    back to AVG on heads whose activation is smaller than 4x4; a variant that
    cannot place a single head of its kind is reported with its error.
    """
    results = []
    for kind in kinds:
        architecture = run.architecture.model_copy(update={"head_kind": kind, "heads": None})
        try:
            if kind == HeadKind.AVG4X4:
                architecture = fit_grid_heads(architecture)
                fitted = [h.kind for h in architecture.resolved_heads()]
                if HeadKind.AVG4X4 not in fitted:
                    raise ConfigurationError("no attach point has an activation of at least 4x4")
                logger.info("Grid pooling heads fitted", head_kinds=[k.value for k in fitted])
            net = ImpatientNet.build(architecture, seed=run.train.seed, dtype=dtype)
        except ConfigurationError as e:
            logger.warning("Head variant does not fit", head_kind=kind.value, reason=str(e))
            results.append(HeadKindResult(head_kind=kind, error=str(e)))
            continue
        _, log = train(net, data, run.train)
        results.append(HeadKindResult(head_kind=kind, val_accuracy=log.final_accuracy()))
    return results
