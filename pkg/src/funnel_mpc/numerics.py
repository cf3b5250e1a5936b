"""Fixed-step Runge-Kutta integration and small dense linear algebra.

Matrices are plain 2-D ``numpy`` arrays throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import IntegrationDivergedError, RankDeficiencyError

Rhs = Callable[[float, np.ndarray], np.ndarray]

# relative singular-value threshold used for rank decisions
RANK_RTOL = 1e-12


@dataclass(frozen=True)
class OdeProblem:
    """Initial value problem ``x' = rhs(t, x)``, ``x(t0) = x0``.

    ``x0`` may carry leading batch dimensions as long as ``rhs`` broadcasts
    over them; ``dimension`` always refers to the trailing axis.
    """

    dimension: int
    rhs: Rhs
    t0: float
    x0: np.ndarray

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape[-1:] != (self.dimension,):
            raise ValueError(
                f"x0 trailing dimension {x0.shape} does not match dimension={self.dimension}"
            )
        object.__setattr__(self, "x0", x0)


def rk4_step(rhs: Rhs, t: float, x: np.ndarray, h: float) -> np.ndarray:
    """One classical Runge-Kutta step of size ``h``."""
    k1 = rhs(t, x)
    k2 = rhs(t + 0.5 * h, x + (0.5 * h) * k1)
    k3 = rhs(t + 0.5 * h, x + (0.5 * h) * k2)
    k4 = rhs(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def time_grid(t0: float, t_end: float, step: float) -> np.ndarray:
    """Grid ``t0, t0+step, ...`` ending exactly at ``t_end``.

    The last interval is shortened to land on ``t_end``; a trailing sliver
    below ``1e-9 * step`` is merged into the previous interval instead.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if t_end < t0:
        raise ValueError("t_end must not precede t0")
    span = t_end - t0
    n_full = int(np.floor(span / step + 1e-9))
    times = t0 + step * np.arange(n_full + 1)
    if t_end - times[-1] > 1e-9 * step:
        times = np.append(times, t_end)
    else:
        times[-1] = t_end
    return times


def integrate_rk4(prob: OdeProblem, t_end: float, step: float):
    """Integrate ``prob`` with fixed-step RK4 up to ``t_end``.

    Returns ``(times, states)`` with ``states[i]`` the solution at
    ``times[i]``; both endpoints are included.

    Raises:
        IntegrationDivergedError: when a non-finite state appears. The
            exception records the last time at which the state was finite.
    """
    times = time_grid(prob.t0, t_end, step)
    states = np.empty((len(times),) + prob.x0.shape)
    x = prob.x0
    states[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(len(times) - 1):
            t = times[i]
            x = rk4_step(prob.rhs, t, x, times[i + 1] - t)
            if not np.all(np.isfinite(x)):
                raise IntegrationDivergedError(t)
            states[i + 1] = x
    return times, states


def _check_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {M.shape}")
    return M


def null_space_basis(H) -> np.ndarray:
    """Orthonormal basis of ``ker H`` for a full-row-rank ``H``.

    Computed from the SVD; the result has ``H.shape[1] - H.shape[0]`` columns.
    Column signs are fixed so the first non-negligible entry is positive.
    """
    H = _check_matrix(H)
    rows, cols = H.shape
    if rows > cols:
        raise RankDeficiencyError(f"H with shape {H.shape} cannot have full row rank")
    _, s, vt = np.linalg.svd(H)
    if s.size and s[-1] <= RANK_RTOL * max(s[0], 1.0):
        raise RankDeficiencyError(f"H is rank deficient (smallest singular value {s[-1]:.3g})")
    V = vt[rows:].T.copy()
    for j in range(V.shape[1]):
        lead = np.flatnonzero(np.abs(V[:, j]) > 1e-12)
        if lead.size and V[lead[0], j] < 0:
            V[:, j] = -V[:, j]
    return V


def pseudoinverse(V) -> np.ndarray:
    """Left inverse ``(V^T V)^{-1} V^T`` of a full-column-rank matrix."""
    V = _check_matrix(V)
    rows, cols = V.shape
    if cols == 0:
        return np.zeros((0, rows))
    if cols > rows or np.linalg.matrix_rank(V, tol=RANK_RTOL * max(np.abs(V).max(), 1.0)) < cols:
        raise RankDeficiencyError(f"V with shape {V.shape} does not have full column rank")
    gram = V.T @ V
    return np.linalg.solve(gram, V.T)
