"""Simulated "true systems" the controller acts on.

A plant is opaque to the controller: only ``output`` is ever read by the
feedback loop. Operator effects (memory, delays, integral terms) live inside
the plant state or its history buffer.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidPlantError, PlantDomainError
from .numerics import rk4_step, time_grid


@dataclass
class Plant:
    """Finite-dimensional realization of a system with input/output dimension m.

    ``rhs(t, x, u)`` must already include the disturbance, if any; the
    ``disturbance`` field is kept for inspection and logging only.
    """

    state_dim: int
    output_dim: int
    rhs: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    output: Callable[[np.ndarray], np.ndarray]
    initial_state: np.ndarray
    disturbance: Optional[Callable[[float], np.ndarray]] = None

    def __post_init__(self):
        self.initial_state = np.asarray(self.initial_state, dtype=float).copy()
        if self.initial_state.shape != (self.state_dim,):
            raise InvalidPlantError(
                f"initial state shape {self.initial_state.shape} != ({self.state_dim},)"
            )

    def reset(self) -> None:
        """Clear any run-time memory before a new simulation."""

    def commit(self, t: float, x: np.ndarray) -> None:
        """Record an accepted integration step (no-op for memoryless plants)."""


@dataclass(frozen=True)
class ReactorParams:
    """Exothermic CSTR constants; defaults are the benchmark values."""

    b: float = 209.2
    c1: float = -1.0
    c2: float = 1.0
    d: float = 1.1
    q: float = 1.25
    k0: float = math.exp(25.0)
    k1: float = 8700.0
    x1_in: float = 1.0
    x2_in: float = 0.0

    def __post_init__(self):
        for name in ("b", "d", "q", "k0", "k1"):
            if getattr(self, name) <= 0:
                raise InvalidPlantError(f"reactor parameter {name} must be positive")
        if self.x1_in < 0 or self.x2_in < 0:
            raise InvalidPlantError("feed concentrations must be nonnegative")

    def reaction_heat(self, x1: float, y: float) -> float:
        """Arrhenius reaction rate ``k0 exp(-k1/y) x1``."""
        return self.k0 * math.exp(-self.k1 / y) * x1


REACTOR_INITIAL_STATE = (270.0, 0.02, 0.9)


def reactor_plant(params: ReactorParams | None = None, initial=REACTOR_INITIAL_STATE) -> Plant:
    """Nonlinear reactor with state ``(y, x1, x2)`` and temperature output ``y``."""
    p = params or ReactorParams()
    initial = np.asarray(initial, dtype=float)
    if initial.shape != (3,):
        raise InvalidPlantError("reactor initial state must have three components")
    if initial[0] <= 0:
        raise InvalidPlantError("reactor temperature must be positive")
    b, c1, c2, d, q, k0, k1 = p.b, p.c1, p.c2, p.d, p.q, p.k0, p.k1
    x1_in, x2_in = p.x1_in, p.x2_in

    def rhs(t, x, u):
        y, x1, x2 = x[0], x[1], x[2]
        if not y > 0:
            raise PlantDomainError(f"reactor temperature left the positive half-line at t={t:.6g}")
        heat = k0 * math.exp(-k1 / y) * x1
        return np.array(
            [
                b * heat - q * y + u[0],
                c1 * heat + d * (x1_in - x1),
                c2 * heat + d * (x2_in - x2),
            ]
        )

    def output(x):
        return x[:1].copy()

    return Plant(state_dim=3, output_dim=1, rhs=rhs, output=output, initial_state=initial)


def reactor_linearization(params: ReactorParams | None = None, y_bar: float = 337.1):
    """Linearize the Arrhenius term at ``y_bar`` and ``x1 = x1_in / 2``.

    Returns ``(A, B, C, offset)`` for ``x' = A x + B u + offset``, ``y = C x``.
    """
    p = params or ReactorParams()
    a2 = p.k0 * math.exp(-p.k1 / y_bar)
    a1 = a2 * p.k1 / y_bar**2 * (p.x1_in / 2.0)
    A = np.array(
        [
            [p.b * a1 - p.q, p.b * a2, 0.0],
            [p.c1 * a1, p.c1 * a2 - p.d, 0.0],
            [p.c2 * a1, p.c2 * a2, -p.d],
        ]
    )
    offset = np.array(
        [
            -p.b * a1 * y_bar,
            -p.c1 * a1 * y_bar + p.d * p.x1_in,
            -p.c2 * a1 * y_bar + p.d * p.x2_in,
        ]
    )
    B = np.array([[1.0], [0.0], [0.0]])
    C = B.T.copy()
    return A, B, C, offset


def linear_operator_plant(A, B, C, x0, matched_disturbance=None) -> Plant:
    """``x' = A x + B (u + delta(t))``, ``y = C x`` with square invertible ``CB``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n, m = B.shape
    if A.shape != (n, n) or C.shape != (m, n):
        raise InvalidPlantError(f"inconsistent shapes A{A.shape} B{B.shape} C{C.shape}")
    CB = C @ B
    if abs(np.linalg.det(CB)) < 1e-12 * max(1.0, np.abs(CB).max()) ** m:
        raise InvalidPlantError("CB is singular; the plant does not have relative degree one")
    delta = matched_disturbance

    def rhs(t, x, u):
        v = np.asarray(u, dtype=float)
        if delta is not None:
            v = v + np.atleast_1d(delta(t))
        return A @ x + B @ v

    def output(x):
        return C @ x

    return Plant(
        state_dim=n, output_dim=m, rhs=rhs, output=output, initial_state=x0, disturbance=delta
    )


@dataclass
class _History:
    """Piecewise-linear state history sampled at accepted steps."""

    times: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def clear(self, t0: float, x0: np.ndarray) -> None:
        self.times = [t0]
        self.states = [np.array(x0, dtype=float)]

    def append(self, t: float, x: np.ndarray) -> None:
        if t > self.times[-1]:
            self.times.append(t)
            self.states.append(np.array(x, dtype=float))

    def at(self, t: float) -> np.ndarray:
        if t <= self.times[0]:
            return self.states[0]
        if t >= self.times[-1]:
            return self.states[-1]
        i = bisect.bisect_right(self.times, t) - 1
        t0, t1 = self.times[i], self.times[i + 1]
        w = (t - t0) / (t1 - t0)
        return (1.0 - w) * self.states[i] + w * self.states[i + 1]


def delayed_output_plant(base: Plant, delay: float) -> Plant:
    """Evaluate ``base``'s vector field on its own state delayed by ``delay``.

    For a scalar base ``y' = a y + u`` this yields ``y'(t) = a y(t - delay) + u(t)``.
    The history before ``t = 0`` is the constant initial state; between
    accepted steps it is linearly interpolated.
    """
    if delay < 0:
        raise InvalidPlantError("delay must be nonnegative")
    if delay == 0:
        return base
    history = _History()
    history.clear(0.0, base.initial_state)

    def rhs(t, x, u):
        return base.rhs(t, history.at(t - delay), u)

    class _DelayedPlant(Plant):
        def reset(self) -> None:
            base.reset()
            history.clear(0.0, base.initial_state)

        def commit(self, t: float, x: np.ndarray) -> None:
            base.commit(t, x)
            history.append(t, x)

    return _DelayedPlant(
        state_dim=base.state_dim,
        output_dim=base.output_dim,
        rhs=rhs,
        output=base.output,
        initial_state=base.initial_state,
        disturbance=base.disturbance,
    )


def simulate_plant(plant: Plant, control, t_end: float, step: float, t0: float = 0.0):
    """Open-loop (or static-feedback) simulation with RK4.

    ``control(t, x)`` returns the input; it may read the state, which allows
    output feedback through ``plant.output``. Returns ``(times, states)``.
    """
    plant.reset()
    times = time_grid(t0, t_end, step)
    states = np.empty((len(times), plant.state_dim))
    x = plant.initial_state.copy()
    states[0] = x

    def f(t, z):
        return plant.rhs(t, z, np.atleast_1d(control(t, z)))

    for i in range(len(times) - 1):
        x = rk4_step(f, times[i], x, times[i + 1] - times[i])
        plant.commit(times[i + 1], x)
        states[i + 1] = x
    return times, states


def plant_from_model(model, x0) -> Plant:
    """Wrap a control-affine model as a plant (used for the matched-model check)."""

    def rhs(t, x, u):
        return model.rhs(x, np.asarray(u, dtype=float))

    return Plant(
        state_dim=model.state_dim,
        output_dim=model.output_dim,
        rhs=rhs,
        output=model.h,
        initial_state=x0,
    )
