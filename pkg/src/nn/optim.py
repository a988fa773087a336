"""SGD with momentum."""

from typing import List, Sequence, Tuple

import numpy as np


class SGD:
    """
    Momentum SGD: v <- mu * v - lr * g; p <- p + v.

    Parameters are updated in place, so layers keep their array references.
    """

    def __init__(
        self,
        parameters: Sequence[Tuple[np.ndarray, np.ndarray]],
        learning_rate: float,
        momentum: float = 0.9,
    ):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.parameters: List[Tuple[np.ndarray, np.ndarray]] = list(parameters)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p, _ in self.parameters]

    def step(self) -> None:
        for (param, grad), velocity in zip(self.parameters, self.velocity):
            velocity *= self.momentum
            velocity -= self.learning_rate * grad
            param += velocity

    def zero_grad(self) -> None:
        for _, grad in self.parameters:
            grad.fill(0.0)
