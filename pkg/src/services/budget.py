"""
Time-budget distributions and per-head loss weights.

A budget density p(t) is turned into head weights by integrating it over the
intervals between exit times: w_k = P(t_k <= T < t_{k+1}), w_K = P(T >= t_K).
Mass before t_1 can never be served by any head and is dropped; the
remaining weights are renormalized. Named schemes simulate common shapes of
p(t) directly. All weight vectors are normalized to sum to 1.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.core.exceptions import BudgetError
from src.core.logging import get_logger
from src.models.schemas import DensityConfig, DensityKind, SchemeKind, WeightSchemeConfig

logger = get_logger(__name__)

NORM_BETA = 0.34
DEFAULT_GAMMA = 2.0
_MASS_TOLERANCE = 1e-6


class BudgetDensity(ABC):
    """Distribution of the time available at inference."""

    @abstractmethod
    def cdf(self, t: float) -> float:
        """P(T < t); left-continuous so a budget equal to t_k counts toward head k."""

    @abstractmethod
    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n budgets."""


@dataclass(frozen=True)
class PiecewiseConstantDensity(BudgetDensity):
    """Density equal to values[i] on [breakpoints[i], breakpoints[i+1]); zero elsewhere."""

    breakpoints: Tuple[float, ...]
    values: Tuple[float, ...]
    _cumulative: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if b.ndim != 1 or b.size < 2 or v.shape != (b.size - 1,):
            raise BudgetError("piecewise density needs m+1 breakpoints and m values")
        if np.any(np.diff(b) <= 0):
            raise BudgetError("breakpoints must be strictly increasing")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise BudgetError("density values must be finite and nonnegative")
        cumulative = np.concatenate([[0.0], np.cumsum(v * np.diff(b))])
        if abs(cumulative[-1] - 1.0) > _MASS_TOLERANCE:
            raise BudgetError(f"density integrates to {cumulative[-1]:.9f}, expected 1")
        object.__setattr__(self, "_cumulative", cumulative / cumulative[-1])

    def cdf(self, t: float) -> float:
        # piecewise-linear interpolation of the cumulative mass is exact on each piece
        return float(np.interp(t, self.breakpoints, self._cumulative, left=0.0, right=1.0))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(n)
        pieces = np.searchsorted(self._cumulative, u, side="right") - 1
        pieces = np.clip(pieces, 0, len(self.values) - 1)
        b = np.asarray(self.breakpoints)
        lo, hi = self._cumulative[pieces], self._cumulative[pieces + 1]
        frac = np.where(hi > lo, (u - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0)
        return b[pieces] + frac * (b[pieces + 1] - b[pieces])


def uniform_density(low: float, high: float) -> PiecewiseConstantDensity:
    if not high > low:
        raise BudgetError("uniform density needs high > low")
    return PiecewiseConstantDensity((float(low), float(high)), (1.0 / (high - low),))


@dataclass(frozen=True)
class ExponentialDensity(BudgetDensity):
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise BudgetError("exponential rate must be positive")

    def cdf(self, t: float) -> float:
        return 0.0 if t <= 0 else float(-math.expm1(-self.rate * t))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.exponential(1.0 / self.rate, size=n)


@dataclass(frozen=True)
class PointMassDensity(BudgetDensity):
    at: float

    def cdf(self, t: float) -> float:
        return 1.0 if t > self.at else 0.0

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.full(n, float(self.at))


@dataclass(frozen=True)
class ExitSchedule:
    """Exit times t_1 < t_2 < ... < t_K."""

    times: Tuple[float, ...]

    def __post_init__(self):
        if len(self.times) < 1:
            raise BudgetError("exit schedule needs at least one exit")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise BudgetError("exit times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class WeightScheme:
    """Named weighting scheme for K heads, or density-derived weights."""

    kind: SchemeKind
    num_heads: int
    gamma: float = DEFAULT_GAMMA
    beta: float = NORM_BETA
    density: Optional[BudgetDensity] = None
    schedule: Optional[ExitSchedule] = None

    @property
    def name(self) -> str:
        return self.kind.value


def weights_from_density(density: BudgetDensity, schedule: ExitSchedule) -> np.ndarray:
    """
    Integrate the budget density over the inter-exit intervals.

    Args:
        density: budget distribution
        schedule: exit times of the K heads

    Returns:
        Normalized weights (w_1, ..., w_K)

    Raises:
        BudgetError: all mass lies before t_1
    """
    below = np.array([density.cdf(t) for t in schedule.times], dtype=np.float64)
    weights = np.diff(np.append(below, 1.0))
    weights = np.clip(weights, 0.0, None)
    reachable = weights.sum()
    if reachable <= 1e-12:
        raise BudgetError("all budget mass lies before the first exit; no head is ever reachable")
    if below[0] > 0:
        logger.debug("dropping budget mass before first exit", dropped=float(below[0]))
    return weights / reachable


def _normalized(raw: np.ndarray) -> np.ndarray:
    return raw / raw.sum()


def scheme_weights(scheme: WeightScheme) -> np.ndarray:
    """
    Weights of a named scheme, normalized to sum 1.

    STD puts all weight on the final head; EQ is uniform; LIN and POLY grow
    as k and k^gamma; ILIN and IPOLY are their reversals; NORM is a Gaussian
    bump exp(-beta (k - (K+1)/2)^2) centred on the middle head.
    """
    K = scheme.num_heads
    if K < 1:
        raise BudgetError("number of heads must be at least 1")
    k = np.arange(1, K + 1, dtype=np.float64)
    kind = scheme.kind

    if kind == SchemeKind.STD:
        weights = np.zeros(K)
        weights[-1] = 1.0
        return weights
    if kind == SchemeKind.EQ:
        return np.full(K, 1.0 / K)
    if kind in (SchemeKind.LIN, SchemeKind.ILIN):
        weights = _normalized(k)
        return weights[::-1].copy() if kind == SchemeKind.ILIN else weights
    if kind in (SchemeKind.POLY, SchemeKind.IPOLY):
        if not scheme.gamma > 1.0:
            raise BudgetError(f"POLY/IPOLY need gamma > 1, got {scheme.gamma}")
        weights = _normalized(k ** scheme.gamma)
        return weights[::-1].copy() if kind == SchemeKind.IPOLY else weights
    if kind == SchemeKind.NORM:
        if not scheme.beta > 0:
            raise BudgetError(f"NORM needs beta > 0, got {scheme.beta}")
        return _normalized(np.exp(-scheme.beta * (k - (K + 1) / 2.0) ** 2))
    if kind == SchemeKind.DENSITY:
        if scheme.density is None or scheme.schedule is None:
            raise BudgetError("density scheme needs a density and an exit schedule")
        if len(scheme.schedule) != K:
            raise BudgetError(f"exit schedule has {len(scheme.schedule)} exits for {K} heads")
        return weights_from_density(scheme.density, scheme.schedule)
    raise BudgetError(f"unknown weighting scheme {kind}")


def density_from_config(cfg: DensityConfig) -> BudgetDensity:
    if cfg.kind == DensityKind.PIECEWISE:
        if cfg.breakpoints is None or cfg.values is None:
            raise BudgetError("piecewise density needs 'breakpoints' and 'values'")
        return PiecewiseConstantDensity(tuple(cfg.breakpoints), tuple(cfg.values))
    if cfg.kind == DensityKind.UNIFORM:
        if cfg.low is None or cfg.high is None:
            raise BudgetError("uniform density needs 'low' and 'high'")
        return uniform_density(cfg.low, cfg.high)
    if cfg.kind == DensityKind.EXPONENTIAL:
        if cfg.rate is None:
            raise BudgetError("exponential density needs 'rate'")
        return ExponentialDensity(cfg.rate)
    if cfg.at is None:
        raise BudgetError("point density needs 'at'")
    return PointMassDensity(cfg.at)


def scheme_from_config(cfg: WeightSchemeConfig, num_heads: int) -> WeightScheme:
    density = density_from_config(cfg.density) if cfg.density is not None else None
    schedule = ExitSchedule(tuple(cfg.exits)) if cfg.exits is not None else None
    return WeightScheme(
        kind=cfg.kind,
        num_heads=num_heads,
        gamma=cfg.gamma,
        beta=cfg.beta,
        density=density,
        schedule=schedule,
    )


def budget_spec_from_config(mapping: Mapping[str, Any], num_heads: int) -> np.ndarray:
    """Weights for a budget section read from a run configuration."""
    cfg = WeightSchemeConfig.model_validate(dict(mapping))
    return scheme_weights(scheme_from_config(cfg, num_heads))


def weights_for(cfg: WeightSchemeConfig, num_heads: int) -> np.ndarray:
    return scheme_weights(scheme_from_config(cfg, num_heads))


def one_hot_weights(num_heads: int, head: int) -> np.ndarray:
    weights = np.zeros(num_heads)
    weights[head] = 1.0
    return weights


def validate_weights(weights: Sequence[float], num_heads: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (num_heads,):
        raise BudgetError(f"expected {num_heads} weights, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise BudgetError("weights must be finite and nonnegative")
    return w
