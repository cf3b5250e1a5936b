"""Funnel boundaries, reference trajectories, gain maps and activation functions.

Every object is a callable plus the bounds the theory needs, e.g. the
sup-norm of a funnel's derivative. Bounds are declared, not derived, and the
test-suite spot-checks them by sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidActivationError, InvalidFunnelError


@dataclass(frozen=True)
class FunnelFunction:
    """Positive, bounded funnel radius with bounded derivative."""

    value: Callable[[float], float]
    derivative_bound: float
    infimum: float

    def __call__(self, t: float) -> float:
        return self.value(t)


@dataclass(frozen=True)
class ReferenceSignal:
    value: Callable[[float], np.ndarray]
    derivative_bound: float
    dim: int = 1

    def __call__(self, t: float) -> np.ndarray:
        return self.value(t)


@dataclass(frozen=True)
class GainPair:
    """Bijection ``alpha: [0,1) -> [1,inf)`` and surjection ``N: R>=0 -> R``."""

    alpha: Callable[[float], float]
    surjection_n: Callable[[float], float]

    def gain(self, s: float) -> float:
        """``(N o alpha)(s)``."""
        return self.surjection_n(self.alpha(s))


@dataclass(frozen=True)
class ActivationFunction:
    beta: Callable[[float], float]
    beta_plus: float
    s_crit: float

    def __call__(self, s: float) -> float:
        return self.beta(s)


def funnel_exp(a: float, lam: float, c: float) -> FunnelFunction:
    """Exponentially shrinking funnel ``a*exp(-lam*t) + c``."""
    if c <= 0:
        raise InvalidFunnelError(f"funnel offset c must be positive, got {c}")
    if a < 0 or lam < 0:
        raise InvalidFunnelError("funnel amplitude and decay rate must be nonnegative")
    a, lam, c = float(a), float(lam), float(c)

    def value(t: float) -> float:
        return a * math.exp(-lam * t) + c

    return FunnelFunction(value=value, derivative_bound=a * lam, infimum=c)


def constant_funnel(c: float) -> FunnelFunction:
    return funnel_exp(0.0, 0.0, c)


def ramp_reference(y_start, y_final, t_final: float) -> ReferenceSignal:
    """Linear ramp from ``y_start`` to ``y_final`` over ``[0, t_final)``, then constant."""
    if t_final <= 0:
        raise ValueError("t_final must be positive")
    y0 = np.atleast_1d(np.asarray(y_start, dtype=float))
    y1 = np.atleast_1d(np.asarray(y_final, dtype=float))
    if y0.shape != y1.shape:
        raise ValueError("y_start and y_final must have the same shape")
    slope = (y1 - y0) / t_final

    def value(t: float) -> np.ndarray:
        if t >= t_final:
            return y1.copy()
        return y0 + slope * t

    return ReferenceSignal(
        value=value,
        derivative_bound=float(np.linalg.norm(y1 - y0)) / t_final,
        dim=y0.size,
    )


def constant_reference(y) -> ReferenceSignal:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return ReferenceSignal(value=lambda t: y.copy(), derivative_bound=0.0, dim=y.size)


def relu_activation(s_crit: float) -> ActivationFunction:
    """``beta(s) = max(s - s_crit, 0)`` on ``[0, 1]``."""
    if not 0.0 < s_crit < 1.0:
        raise InvalidActivationError(f"s_crit must lie in (0, 1), got {s_crit}")
    s_crit = float(s_crit)

    def beta(s: float) -> float:
        return s - s_crit if s > s_crit else 0.0

    return ActivationFunction(beta=beta, beta_plus=1.0 - s_crit, s_crit=s_crit)


def _alpha(s: float) -> float:
    return 1.0 / (1.0 - s)


def _n_definite(s: float) -> float:
    return -s


def _n_oscillating(s: float) -> float:
    return s * math.sin(s)


def standard_gains(definite: bool = True) -> GainPair:
    """``alpha(s) = 1/(1-s)`` with ``N(s) = -s`` (sign-definite high-gain
    matrix) or the sign-agnostic ``N(s) = s sin(s)``."""
    return GainPair(alpha=_alpha, surjection_n=_n_definite if definite else _n_oscillating)
