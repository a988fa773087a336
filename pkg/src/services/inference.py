"""
Budgeted inference: a-priori budget, anytime interruption and cascades.

Costs are analytic multiply-accumulate counts per example. t_B(k) charges the
backbone prefix up to head k plus head k alone; t_A(k) additionally charges
every earlier head, since an interruptible run has to compute them all.
"""

import bisect
import time
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from src.core.exceptions import BudgetError, DataFormatError, ShapeMismatchError
from src.core.logging import get_logger
from src.models.schemas import CascadePolicy, CostModel, Criterion, InferenceResult
from src.nn.losses import softmax
from src.services.network import ImpatientNet, StagedPrediction

logger = get_logger(__name__)


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------


def _median_ms(fn, repeats: int) -> float:
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1e3)
    return float(np.median(samples))


def measure_costs(
    net: ImpatientNet,
    calibration_batch: Optional[np.ndarray] = None,
    repeats: int = 5,
) -> CostModel:
    """
    Analytic MAC costs of every head, plus measured wall-clock when a batch is given.

    Wall-clock figures are per-example medians over `repeats` runs and are
    informational only.

    Raises:
        DataFormatError: empty calibration batch
        BudgetError: an architecture whose costs are not strictly increasing
    """
    layer_macs = []
    shape = net.input_shape
    shapes = []
    for layer in net.backbone:
        layer_macs.append(layer.macs(shape))
        shape = layer.output_shape(shape)
        shapes.append(shape)
    cumulative = np.cumsum(layer_macs)

    prefix = [int(cumulative[p]) for p in net.attach_points]
    heads = [int(head.macs(shapes[p])) for head, p in zip(net.heads, net.attach_points)]
    t_b = [p + h for p, h in zip(prefix, heads)]
    t_a = [p + int(np.sum(heads[:k + 1])) for k, p in enumerate(prefix)]

    t_b_ms = t_a_ms = None
    if calibration_batch is not None:
        if len(calibration_batch) == 0:
            raise DataFormatError("calibration batch is empty")
        net.eval()
        n = len(calibration_batch)
        t_b_ms = [_median_ms(lambda k=k: net.forward_head(calibration_batch, k), repeats) / n
                  for k in range(net.num_heads)]
        t_a_ms = [_median_ms(lambda k=k: net.truncated(k).forward_all(calibration_batch), repeats) / n
                  for k in range(net.num_heads)]

    try:
        model = CostModel(prefix_costs=prefix, head_costs=heads, t_b=t_b, t_a=t_a, t_b_ms=t_b_ms, t_a_ms=t_a_ms)
    except ValidationError as e:
        raise BudgetError(f"invalid cost schedule {t_b}: {e}") from e
    logger.debug("Measured costs", t_b=t_b, t_a=t_a)
    return model


# ---------------------------------------------------------------------------
# Exit selection
# ---------------------------------------------------------------------------


def select_head_for_budget(budget: float, t_b: Sequence[float]) -> int:
    """Deepest 0-based head k with t_b[k] <= budget."""
    k = bisect.bisect_right(list(t_b), budget) - 1
    if k < 0:
        raise BudgetError(f"budget {budget} is below the cost of the first head ({t_b[0]})")
    return k


def select_head_for_interrupt(interrupt_at: float, t_a: Sequence[float]) -> int:
    """Latest 0-based head completed by `interrupt_at`; completion at exactly t counts."""
    k = bisect.bisect_right(list(t_a), interrupt_at) - 1
    if k < 0:
        raise BudgetError(f"interrupted at {interrupt_at}, before the first head completes ({t_a[0]})")
    return k


# ---------------------------------------------------------------------------
# Cascade criteria
# ---------------------------------------------------------------------------


def ratio_1v2(probs: np.ndarray) -> np.ndarray:
    """Top-1 over top-2 probability along the last axis; +inf when the runner-up is 0."""
    probs = np.asarray(probs, dtype=np.float64)
    top2 = np.partition(probs, -2, axis=-1)[..., -2:]
    first, second = top2[..., 1], top2[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(second > 0, first / np.where(second > 0, second, 1.0), np.inf)


def normalized_entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy divided by ln C, in [0, 1]."""
    probs = np.asarray(probs, dtype=np.float64)
    num_classes = probs.shape[-1]
    if num_classes < 2:
        return np.zeros(probs.shape[:-1])
    terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return np.clip(-terms.sum(axis=-1) / np.log(num_classes), 0.0, 1.0)


def criterion_passes(probs: np.ndarray, policy: CascadePolicy) -> np.ndarray:
    if policy.criterion == Criterion.RATIO:
        if np.isinf(policy.threshold):
            return np.zeros(np.shape(probs)[:-1], dtype=bool)
        return ratio_1v2(probs) >= policy.threshold
    return normalized_entropy(probs) <= policy.threshold


def cascade_stop_index(probabilities: np.ndarray, policy: CascadePolicy) -> np.ndarray:
    """
    0-based stopping head for every example.

    Args:
        probabilities: (K, N, C) class probabilities of every head

    Returns:
        (N,) index of the first head whose criterion passes, K-1 if none does
    """
    passes = criterion_passes(probabilities, policy)
    passes[-1] = True
    return passes.argmax(axis=0)


# ---------------------------------------------------------------------------
# Single-example inference
# ---------------------------------------------------------------------------


def _as_batch(net: ImpatientNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape == net.input_shape:
        return x[None]
    if x.ndim == 4 and x.shape[0] == 1:
        return x
    raise ShapeMismatchError(f"expected a single example of shape {net.input_shape}, got {x.shape}")


def staged_prediction(net: ImpatientNet, batch: np.ndarray, cost_model: CostModel) -> StagedPrediction:
    """Every head's probabilities in eval mode, stamped with the cumulative t_A costs."""
    if cost_model.num_heads != net.num_heads:
        raise BudgetError(f"cost model has {cost_model.num_heads} heads, network has {net.num_heads}")
    net.eval()
    return net.forward_all(batch, cost_model.t_a)


def predict_with_budget(net: ImpatientNet, x: np.ndarray, budget: float, cost_model: CostModel) -> InferenceResult:
    """Run only the deepest head affordable under t_B, skipping every other head."""
    k = select_head_for_budget(budget, cost_model.t_b)
    net.eval()
    probs = net.forward_head(_as_batch(net, x), k)[0]
    return InferenceResult(
        predicted_class=int(probs.argmax()),
        head_index=k + 1,
        cost=cost_model.t_b[k],
        probabilities=[probs.tolist()],
    )


def predict_anytime(net: ImpatientNet, x: np.ndarray, interrupt_at: float, cost_model: CostModel) -> InferenceResult:
    """Evaluate heads in order and report the latest one completed by `interrupt_at` under t_A."""
    k = select_head_for_interrupt(interrupt_at, cost_model.t_a)
    net.eval()
    computed: List[np.ndarray] = []
    for logits in net.iter_head_logits(_as_batch(net, x)):
        computed.append(softmax(logits)[0])
        if len(computed) == k + 1:
            break
    probs = computed[-1]
    return InferenceResult(
        predicted_class=int(probs.argmax()),
        head_index=k + 1,
        cost=cost_model.t_a[k],
        probabilities=[p.tolist() for p in computed],
    )


def predict_cascade(net: ImpatientNet, x: np.ndarray, policy: CascadePolicy, cost_model: CostModel) -> InferenceResult:
    """Evaluate heads in order and stop at the first confident one (head K otherwise)."""
    net.eval()
    computed: List[np.ndarray] = []
    for k, logits in enumerate(net.iter_head_logits(_as_batch(net, x))):
        probs = softmax(logits)[0]
        computed.append(probs)
        if k == net.num_heads - 1 or bool(criterion_passes(probs, policy)):
            break
    k = len(computed) - 1
    return InferenceResult(
        predicted_class=int(computed[-1].argmax()),
        head_index=k + 1,
        cost=cost_model.t_a[k],
        probabilities=[p.tolist() for p in computed],
    )
