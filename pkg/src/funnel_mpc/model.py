"""Control-affine surrogate models, their Byrnes-Isidori coordinates and
the rules for re-initializing the model state from plant measurements."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InvalidModelError, MissingTransformError
from .numerics import OdeProblem, integrate_rk4, null_space_basis, pseudoinverse


@dataclass(frozen=True)
class BifTransform:
    """Coordinates ``(y, eta) = forward(x)`` with ``inverse(y, eta) = x``.

    Both maps broadcast over leading batch axes.
    """

    forward: Callable[[np.ndarray], tuple]
    inverse: Callable[[np.ndarray, np.ndarray], np.ndarray]
    internal_dim: int


@dataclass(frozen=True)
class ControlAffineModel:
    """``x' = f(x) + g(x) u``, ``y = h(x)``.

    ``f``, ``g`` and ``h`` must accept states with leading batch axes; ``g``
    returns ``(..., n, m)``. ``linear`` holds ``(A, B, C, offset)`` when the
    model was built by :func:`linear_model`.
    """

    state_dim: int
    output_dim: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    bif: Optional[BifTransform] = None
    linear: Optional[tuple] = None

    def rhs(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.linear is not None:
            A, B, _, offset = self.linear
            return x @ A.T + u @ B.T + offset
        return self.f(x) + np.einsum("...nm,...m->...n", self.g(x), u)


def linear_bif(A, B, C) -> BifTransform:
    """Byrnes-Isidori coordinates of a linear model with invertible ``CB``.

    ``forward(x) = (C x, V^+ (I - B (CB)^{-1} C) x)`` where the columns of
    ``V`` are an orthonormal basis of ``ker C``.
    """
    G = np.atleast_2d(np.asarray(B, dtype=float))
    H = np.atleast_2d(np.asarray(C, dtype=float))
    n, m = G.shape
    if H.shape != (m, n):
        raise InvalidModelError(f"C must have shape ({m}, {n}), got {H.shape}")
    HG = H @ G
    if np.linalg.matrix_rank(H) < m or np.linalg.matrix_rank(HG) < m:
        raise InvalidModelError("C must have full row rank and CB must be invertible")
    V = null_space_basis(H)
    V_pinv = pseudoinverse(V)
    G_HG_inv = G @ np.linalg.inv(HG)
    eta_map = V_pinv @ (np.eye(n) - G_HG_inv @ H)

    def forward(x):
        x = np.asarray(x, dtype=float)
        return x @ H.T, x @ eta_map.T

    def inverse(y, eta):
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        return y @ G_HG_inv.T + eta @ V.T

    return BifTransform(forward=forward, inverse=inverse, internal_dim=n - m)


def linear_model(A, B, C, offset=None) -> ControlAffineModel:
    """``x' = A x + B u + offset``, ``y = C x`` with its linear BIF attached."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n, m = B.shape
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float).reshape(n)
    if A.shape != (n, n) or C.shape != (m, n):
        raise InvalidModelError(f"inconsistent shapes A{A.shape} B{B.shape} C{C.shape}")
    if abs(np.linalg.det(C @ B)) < 1e-12:
        raise InvalidModelError("CB is singular; the model does not have relative degree one")
    bif = linear_bif(A, B, C)

    def f(x):
        return x @ A.T + offset

    def g(x):
        return np.broadcast_to(B, np.shape(x)[:-1] + B.shape)

    def h(x):
        return x @ C.T

    return ControlAffineModel(
        state_dim=n, output_dim=m, f=f, g=g, h=h, bif=bif, linear=(A, B, C, offset)
    )


class InitVariant(str, enum.Enum):
    OPEN_LOOP = "open_loop"
    OUTPUT_RESET_KEEP_INTERNAL = "output_reset_keep_internal"
    OUTPUT_RESET_ZERO_INTERNAL = "output_reset_zero_internal"


@dataclass(frozen=True)
class InitializationStrategy:
    variant: InitVariant = InitVariant.OPEN_LOOP
    xi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "variant", InitVariant(self.variant))
        if self.xi < 0:
            raise ValueError("xi must be nonnegative")


def proper_init(strategy: InitializationStrategy, model: ControlAffineModel, x_pre, y_hat):
    """Choose the model state at the start of an MPC cycle.

    Open loop keeps the predicted state. The output-reset variants place the
    model output on the measurement ``y_hat`` and either keep the internal
    coordinates of ``x_pre`` or set them to zero.
    """
    x_pre = np.asarray(x_pre, dtype=float)
    if strategy.variant is InitVariant.OPEN_LOOP:
        return x_pre.copy()
    if model.bif is None:
        raise MissingTransformError(
            f"{strategy.variant.value} requires a Byrnes-Isidori transform on the model"
        )
    y_hat = np.asarray(y_hat, dtype=float).reshape(model.output_dim)
    if strategy.variant is InitVariant.OUTPUT_RESET_KEEP_INTERNAL:
        _, eta = model.bif.forward(x_pre)
    else:
        eta = np.zeros(model.bif.internal_dim)
    return model.bif.inverse(y_hat, eta)


def in_omega(strategy: InitializationStrategy, model: ControlAffineModel, x_hat, x_pre, y_hat,
             atol: float = 1e-9) -> bool:
    """Membership test for the set of admissible initializations."""
    x_hat = np.asarray(x_hat, dtype=float)
    if np.array_equal(x_hat, np.asarray(x_pre, dtype=float)):
        return True
    if model.bif is None:
        return False
    if np.max(np.abs(model.h(x_hat) - np.asarray(y_hat))) > atol:
        return False
    _, eta_hat = model.bif.forward(x_hat)
    _, eta_pre = model.bif.forward(x_pre)
    return bool(
        np.max(np.abs(eta_hat - eta_pre), initial=0.0) <= atol
        or np.linalg.norm(eta_hat) <= strategy.xi + atol
    )


@dataclass(frozen=True)
class PiecewiseConstant:
    """Zero-order-hold signal on ``[t0, t0 + len(values) * dt]``."""

    t0: float
    dt: float
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        object.__setattr__(self, "values", values)

    @property
    def intervals(self) -> int:
        return self.values.shape[0]

    @property
    def t_end(self) -> float:
        return self.t0 + self.intervals * self.dt

    def breakpoints(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.intervals + 1)

    def index(self, t: float) -> int:
        i = int(np.floor((t - self.t0) / self.dt + 1e-9))
        return min(max(i, 0), self.intervals - 1)

    def __call__(self, t: float) -> np.ndarray:
        return self.values[self.index(t)]


def model_rollout(model: ControlAffineModel, t0: float, x0, control: PiecewiseConstant,
                  t_end: float, step: float):
    """Integrate the model under a zero-order-hold control.

    Integration restarts at every control breakpoint inside ``[t0, t_end]``.
    Returns ``(times, states, outputs)``; breakpoints appear once.
    """
    if t0 < control.t0 - 1e-12 or t_end > control.t_end + 1e-9:
        raise ValueError("control does not cover the rollout interval")
    x = np.asarray(x0, dtype=float)
    cuts = [t for t in control.breakpoints() if t0 < t < t_end - 1e-12]
    edges = [t0, *cuts, t_end]
    all_t = [np.array([t0])]
    all_x = [x[None]]
    for a, b in zip(edges[:-1], edges[1:]):
        u = control(a)

        def rhs(t, z, u=u):
            return model.rhs(z, u)

        times, states = integrate_rk4(OdeProblem(model.state_dim, rhs, a, x), b, step)
        all_t.append(times[1:])
        all_x.append(states[1:])
        x = states[-1]
    times = np.concatenate(all_t)
    states = np.concatenate(all_x)
    return times, states, model.h(states)
