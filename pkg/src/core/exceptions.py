"""
Exception hierarchy for Impatient Networks.

Every error raised by the library derives from ImpatientError and also from
the closest builtin exception, so callers can catch either.
"""

from typing import Any, Optional


class ImpatientError(Exception):
    """Base class for all library errors."""


class ShapeMismatchError(ImpatientError, ValueError):
    """Input shape incompatible with a layer, head or network."""


class NonFiniteError(ImpatientError, FloatingPointError):
    """NaN or Inf produced during a forward or backward pass."""


class BackwardBeforeForwardError(ImpatientError, RuntimeError):
    """backward() called on a layer that has no cached forward pass."""


class BudgetError(ImpatientError, ValueError):
    """Invalid budget density, exit schedule, weighting scheme or cost budget."""


class ConfigurationError(ImpatientError, ValueError):
    """Invalid run, architecture or training configuration."""


class DataFormatError(ImpatientError, ValueError):
    """Malformed dataset file or inconsistent dataset contents."""


class CheckpointError(ImpatientError, ValueError):
    """Checkpoint file unreadable or inconsistent with its manifest."""


class DivergenceError(ImpatientError, RuntimeError):
    """Training loss became non-finite or exploded."""

    def __init__(
        self,
        message: str,
        epoch: int,
        step: int,
        loss: float,
        log: Optional[Any] = None,
    ):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.loss = loss
        self.log = log


class LabelRangeError(ImpatientError, ValueError):
    """Class label outside [0, num_classes)."""
