"""
Softmax and cross-entropy.

The loss is averaged over the batch; gradients are with respect to the logits.
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from src.core.exceptions import BackwardBeforeForwardError, LabelRangeError, ShapeMismatchError


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Evaluated in float64 whatever the input dtype."""
    wide = np.asarray(logits, dtype=np.float64)
    shifted = wide - wide.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


@dataclass(frozen=True)
class LossValue:
    """Scalar loss, its gradient w.r.t. the logits, and the per-example losses."""
    loss: float
    grad: np.ndarray
    per_example: np.ndarray


def softmax_cross_entropy(logits: np.ndarray, labels: Union[int, np.ndarray]) -> LossValue:
    """
    Mean of -log softmax(logits)[label] over the batch.

    Args:
        logits: (C,) for a single example or (N, C) for a batch
        labels: class index or (N,) integer array

    Returns:
        LossValue with grad = (softmax - one_hot(label)) / N, shaped like logits
    """
    single = logits.ndim == 1
    batch_logits = logits[None, :] if single else logits
    batch_labels = np.atleast_1d(np.asarray(labels))
    if batch_logits.ndim != 2 or batch_labels.shape != (batch_logits.shape[0],):
        raise ShapeMismatchError(
            f"logits {logits.shape} and labels {np.shape(labels)} do not describe the same batch"
        )
    num_classes = batch_logits.shape[1]
    if batch_labels.size and (batch_labels.min() < 0 or batch_labels.max() >= num_classes):
        raise LabelRangeError(f"labels must lie in [0, {num_classes})")

    n = batch_logits.shape[0]
    rows = np.arange(n)
    log_probs = log_softmax(batch_logits)
    per_example = -log_probs[rows, batch_labels]
    grad = np.exp(log_probs)
    grad[rows, batch_labels] -= 1.0
    grad /= n
    if np.issubdtype(batch_logits.dtype, np.floating):
        grad = grad.astype(batch_logits.dtype, copy=False)
    return LossValue(
        loss=float(per_example.mean()),
        grad=grad[0] if single else grad,
        per_example=per_example,
    )


class SoftmaxCrossEntropy:
    """Loss layer closing an early-prediction head."""

    kind = "softmax_cross_entropy"

    def __init__(self):
        self._last: Optional[LossValue] = None

    def forward(self, logits: np.ndarray, labels: Union[int, np.ndarray]) -> float:
        self._last = softmax_cross_entropy(logits, labels)
        return self._last.loss

    def backward(self, scale: float = 1.0) -> np.ndarray:
        if self._last is None:
            raise BackwardBeforeForwardError("softmax cross-entropy: backward() called before forward()")
        return scale * self._last.grad
