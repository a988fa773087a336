"""
Retry logic utilities with step-size backoff.

Training runs that diverge are retried from scratch with a smaller learning
rate instead of waiting and repeating the same call.
"""

from typing import Callable, Tuple, Type, TypeVar

from src.core.logging import get_logger

logger = get_logger(__name__)

T = TypeVar("T")


def retry_with_backoff(
    func: Callable[[float], T],
    initial_value: float,
    max_attempts: int = 1,
    backoff_factor: float = 0.5,
    retry_on: Tuple[Type[BaseException], ...] = (Exception,),
) -> T:
    """
    Call func(value), shrinking value after each failure.

    Args:
        func: Callable taking the current value (e.g. a learning rate)
        initial_value: Value for the first attempt
        max_attempts: Maximum number of attempts
        backoff_factor: Multiplier applied to value after each failed attempt
        retry_on: Exception types that trigger another attempt

    Returns:
        Result from func

    Raises:
        Last exception if all attempts fail
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")
    value = initial_value

    for attempt in range(1, max_attempts + 1):
        try:
            result = func(value)
            if attempt > 1:
                logger.info(f"Succeeded on attempt {attempt}", value=value)
            return result

        except retry_on as e:
            if attempt == max_attempts:
                logger.error(f"All {max_attempts} attempts failed: {e}")
                raise

            next_value = value * backoff_factor
            logger.warning(f"Attempt {attempt} failed: {e}. Retrying with {next_value:g}")
            value = next_value

    raise AssertionError("unreachable")
