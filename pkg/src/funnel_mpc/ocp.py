"""Funnel MPC optimal control problem.

The control is piecewise constant on ``control_intervals`` equal intervals
of the horizon. The running cost is integrated as an extra RK4 state on the
same grid as the dynamics, so the discrete objective is a weighted sum of the
stage cost at the RK4 stage points ("quadrature nodes"). Trajectories that
touch the funnel boundary at any node have infinite cost and are rejected.

Minimization is a scaled gradient projection on the box ``|u_i| <= M`` with
Armijo backtracking along the projection arc.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InfeasibleStartError, OcpInfeasibleError
from .model import ControlAffineModel, PiecewiseConstant, model_rollout
from .signals import FunnelFunction, ReferenceSignal

logger = logging.getLogger(__name__)

RK4_WEIGHTS = np.array([1.0, 2.0, 2.0, 1.0]) / 6.0
RK4_OFFSETS = np.array([0.0, 0.5, 0.5, 1.0])


@dataclass(frozen=True)
class StageCostParams:
    lambda_u: float
    funnel: FunnelFunction
    reference: ReferenceSignal

    def __post_init__(self):
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be nonnegative")


@dataclass(frozen=True)
class OcpConfig:
    horizon_T: float = 0.75
    control_intervals: int = 15
    input_bound_M: float = 600.0
    integration_substeps: int = 10
    max_iterations: int = 200
    gradient_tolerance: float = 1e-6
    infeasibility_penalty_cap: float = 1e12
    # "auto" uses exact gradients for linear models and central differences otherwise
    gradient: str = "auto"
    fd_relative_step: float = 1e-6

    def __post_init__(self):
        if self.horizon_T <= 0:
            raise ValueError("horizon_T must be positive")
        if self.control_intervals < 1 or self.integration_substeps < 1:
            raise ValueError("control_intervals and integration_substeps must be positive")
        if self.input_bound_M <= 0:
            raise ValueError("input_bound_M must be positive")
        if self.gradient not in ("auto", "exact", "fd"):
            raise ValueError(f"unknown gradient mode {self.gradient!r}")

    @property
    def interval_length(self) -> float:
        return self.horizon_T / self.control_intervals


@dataclass
class OcpSolution:
    control: PiecewiseConstant
    predicted_times: np.ndarray
    predicted_states: np.ndarray
    cost: float
    converged: bool
    iterations: int = 0
    gradient_norm: float = math.nan
    history: list = field(default_factory=list, repr=False)


def stage_cost(params: StageCostParams, t: float, x, u, h) -> float:
    """Barrier-type tracking cost plus control penalty; ``inf`` outside the funnel."""
    e = np.atleast_1d(h(np.asarray(x, dtype=float))) - params.reference(t)
    psi = params.funnel(t)
    e2 = float(e @ e)
    if not e2 < psi * psi:
        return math.inf
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return e2 / (psi * psi - e2) + params.lambda_u * float(u @ u)


class _Discretization:
    """Quadrature nodes of one OCP instance and batched evaluation on them."""

    def __init__(self, model, params, config, t_k, x_hat):
        self.model = model
        self.params = params
        self.config = config
        self.t_k = float(t_k)
        self.x_hat = np.asarray(x_hat, dtype=float)
        N, S = config.control_intervals, config.integration_substeps
        self.N, self.S, self.m = N, S, model.output_dim
        self.dt = config.interval_length
        self.h = self.dt / S
        sub_starts = self.t_k + self.h * np.arange(N * S)
        self.node_times = sub_starts[:, None] + self.h * RK4_OFFSETS[None, :]
        self.node_weights = np.broadcast_to(self.h * RK4_WEIGHTS, self.node_times.shape).ravel()
        flat = self.node_times.ravel()
        self.psi2 = np.array([params.funnel(t) for t in flat]) ** 2
        self.yref = np.array([np.atleast_1d(params.reference(t)) for t in flat])
        self._affine = None

    def node_outputs(self, U: np.ndarray) -> np.ndarray:
        """Model outputs at all nodes for a batch of controls ``(B, N, m)``."""
        model = self.model
        B = U.shape[0]
        h = self.h
        x = np.broadcast_to(self.x_hat, (B, model.state_dim)).copy()
        out = np.empty((B, self.N * self.S, 4, self.m))
        k = 0
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(self.N):
                u = U[:, j, :]
                for _ in range(self.S):
                    k1 = model.rhs(x, u)
                    x2 = x + 0.5 * h * k1
                    k2 = model.rhs(x2, u)
                    x3 = x + 0.5 * h * k2
                    k3 = model.rhs(x3, u)
                    x4 = x + h * k3
                    k4 = model.rhs(x4, u)
                    out[:, k, 0] = model.h(x)
                    out[:, k, 1] = model.h(x2)
                    out[:, k, 2] = model.h(x3)
                    out[:, k, 3] = model.h(x4)
                    x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                    k += 1
        return out.reshape(B, -1, self.m)

    def affine(self):
        """``(Y0, S)`` with node outputs ``Y0 + S @ u`` for linear models."""
        if self._affine is None:
            nu = self.N * self.m
            basis = np.concatenate([np.zeros((1, nu)), np.eye(nu)]).reshape(nu + 1, self.N, self.m)
            Y = self.node_outputs(basis).reshape(nu + 1, -1)
            self._affine = (Y[0], (Y[1:] - Y[0]).T)
        return self._affine

    def cost_from_outputs(self, Y: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Objective for each batch entry; ``inf`` when any node leaves the funnel."""
        E = Y - self.yref
        e2 = np.einsum("bim,bim->bi", E, E)
        gap = self.psi2 - e2
        inside = np.all(gap > 0, axis=1) & np.all(np.isfinite(e2), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            track = (e2 / gap) @ self.node_weights
        effort = self.params.lambda_u * self.dt * np.einsum("bjm,bjm->b", U, U)
        return np.where(inside, track + effort, np.inf)

    def outputs(self, U: np.ndarray) -> np.ndarray:
        if self.model.linear is not None:
            Y0, S = self.affine()
            return (Y0 + U.reshape(U.shape[0], -1) @ S.T).reshape(U.shape[0], -1, self.m)
        return self.node_outputs(U)

    def cost(self, U: np.ndarray) -> np.ndarray:
        return self.cost_from_outputs(self.outputs(U), U)

    def greedy_start(self, levels: int = 41) -> np.ndarray:
        """Interval-by-interval search for a feasible control.

        Interval ``j`` takes the grid value (held to the horizon end) that
        minimizes the cost accumulated up to the end of interval ``j``.
        """
        M = self.config.input_bound_M
        grid = np.linspace(-M, M, levels)
        cands = np.zeros((self.m * levels, self.m))
        for i in range(self.m):
            cands[i * levels:(i + 1) * levels, i] = grid
        U = np.zeros((self.N, self.m))
        nodes_per_interval = 4 * self.S
        for j in range(self.N):
            batch = np.repeat(U[None], len(cands), axis=0)
            batch[:, j:, :] = cands[:, None, :]
            Y = self.outputs(batch)
            end = (j + 1) * nodes_per_interval
            E = Y[:, :end] - self.yref[:end]
            e2 = np.einsum("bim,bim->bi", E, E)
            gap = self.psi2[:end] - e2
            with np.errstate(divide="ignore", invalid="ignore"):
                c = (e2 / gap) @ self.node_weights[:end]
            c = np.where(np.all(gap > 0, axis=1), c, np.inf)
            best = int(np.argmin(c))
            if not np.isfinite(c[best]):
                break
            U[j:] = cands[best]
        return U

    def _node_terms(self, u: np.ndarray):
        Y0, S = self.affine()
        E = (Y0 + S @ u.ravel()).reshape(-1, self.m) - self.yref
        e2 = np.einsum("im,im->i", E, E)
        return S, E, e2, self.psi2 - e2

    def exact_gradient(self, u: np.ndarray) -> np.ndarray:
        S, E, _, gap = self._node_terms(u)
        dcost_dy = (self.node_weights * 2.0 * self.psi2 / gap**2)[:, None] * E
        grad = S.T @ dcost_dy.ravel()
        return grad.reshape(u.shape) + 2.0 * self.params.lambda_u * self.dt * u

    def exact_hessian(self, u: np.ndarray) -> np.ndarray:
        S, E, _, gap = self._node_terms(u)
        w = self.node_weights * self.psi2
        # per-node Hessian of |e|^2 / (psi^2 - |e|^2) with respect to y
        blocks = (2.0 * w / gap**2)[:, None, None] * np.eye(self.m) + (8.0 * w / gap**3)[
            :, None, None
        ] * np.einsum("ia,ib->iab", E, E)
        nodes = E.shape[0]
        Sn = S.reshape(nodes, self.m, -1)
        H = np.einsum("iak,iab,ibl->kl", Sn, blocks, Sn)
        return H + 2.0 * self.params.lambda_u * self.dt * np.eye(H.shape[0])

    def fd_gradient(self, u: np.ndarray, base_cost: float):
        """Central differences; also returns the diagonal curvature estimate."""
        eps = self.config.fd_relative_step * max(self.config.input_bound_M, 1.0)
        n = u.size
        probes = np.repeat(u.ravel()[None], 2 * n, axis=0)
        idx = np.arange(n)
        probes[idx, idx] += eps
        probes[n + idx, idx] -= eps
        c = self.cost(probes.reshape(2 * n, self.N, self.m))
        plus, minus = c[:n], c[n:]
        both = np.isfinite(plus) & np.isfinite(minus)
        with np.errstate(invalid="ignore"):
            grad = np.where(
                both,
                (plus - minus) / (2 * eps),
                np.where(np.isfinite(plus), (plus - base_cost) / eps, (base_cost - minus) / eps),
            )
            curvature = np.where(both, (plus - 2.0 * base_cost + minus) / eps**2, np.nan)
        grad = np.where(np.isfinite(grad), grad, 0.0)
        return grad.reshape(u.shape), curvature

    def uses_exact(self) -> bool:
        mode = self.config.gradient
        if mode == "exact" and self.model.linear is None:
            raise ValueError("exact gradients are only available for linear models")
        return mode == "exact" or (mode == "auto" and self.model.linear is not None)


def _project(u: np.ndarray, M: float) -> np.ndarray:
    return np.clip(u, -M, M)


def _candidate_starts(config: OcpConfig, m: int, warm_start) -> list:
    N, M = config.control_intervals, config.input_bound_M
    starts = []
    if warm_start is not None:
        values = warm_start.values if isinstance(warm_start, PiecewiseConstant) else warm_start
        values = np.asarray(values, dtype=float).reshape(N, m)
        starts.append(_project(values, M))
    starts.append(np.zeros((N, m)))
    for level in (0.5, 1.0, -0.5, -1.0):
        starts.append(np.full((N, m), level * M))
    return starts


def _scaled_direction(H: np.ndarray, g: np.ndarray, free: np.ndarray) -> np.ndarray:
    """Newton direction on the free components, scaled gradient on the rest."""
    d = np.zeros_like(g)
    diag = np.clip(np.diag(H), 1e-12, None)
    d[~free] = -g[~free] / diag[~free]
    if np.any(free):
        Hff = H[np.ix_(free, free)]
        try:
            chol = np.linalg.cholesky(Hff)
            d[free] = -np.linalg.solve(chol.T, np.linalg.solve(chol, g[free]))
        except np.linalg.LinAlgError:
            d[free] = -g[free] / diag[free]
    return d


def _minimize(disc: _Discretization, u0: np.ndarray, c0: float, config: OcpConfig):
    """Projected descent on the box with Armijo backtracking along the projection arc.

    Descent directions are scaled by the cost Hessian on the components not
    pinned at the bounds (exact for linear models, BFGS otherwise); pinned
    components follow the projected gradient.
    """
    M = config.input_bound_M
    cap = config.infeasibility_penalty_cap
    shape = u0.shape
    exact = disc.uses_exact()
    u, c = u0.ravel().copy(), c0

    def grad_and_curv(v, cv):
        if exact:
            return disc.exact_gradient(v.reshape(shape)).ravel(), None
        gv, curv = disc.fd_gradient(v.reshape(shape), cv)
        return gv.ravel(), curv.ravel()

    g, curv = grad_and_curv(u, c)
    if exact:
        H = disc.exact_hessian(u.reshape(shape))
    else:
        diag = np.where(np.isfinite(curv) & (curv > 0), curv, 1.0)
        H = np.diag(diag)
    pg_norm = float(np.linalg.norm(_project(u - g, M) - u))
    history = [c]
    iterations = 0
    stalled = False
    while iterations < config.max_iterations and pg_norm > config.gradient_tolerance:
        iterations += 1
        eps = min(1e-3 * M, pg_norm)
        pinned = ((u <= -M + eps) & (g > 0)) | ((u >= M - eps) & (g < 0))
        d = _scaled_direction(H, g, ~pinned)
        accepted = False
        for attempt in range(2):
            theta = 1.0
            for _ in range(60):
                trial = _project(u + theta * d, M)
                ct = float(disc.cost(trial.reshape((1,) + shape))[0])
                if not math.isfinite(ct):
                    ct = cap
                decrease = float(g @ (trial - u))
                if decrease < 0 and ct <= c + 1e-4 * decrease:
                    accepted = True
                    break
                theta *= 0.5
            if accepted:
                break
            # fall back to a plain projected-gradient arc
            d = -g / np.clip(np.diag(H), 1e-12, None)
        if not accepted:
            stalled = True
            break
        g_new, curv = grad_and_curv(trial, ct)
        if exact:
            H = disc.exact_hessian(trial.reshape(shape))
        else:
            s, yv = trial - u, g_new - g
            sy = float(s @ yv)
            if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yv)):
                Hs = H @ s
                H = H - np.outer(Hs, Hs) / float(s @ Hs) + np.outer(yv, yv) / sy
        u, c, g = trial, ct, g_new
        pg_norm = float(np.linalg.norm(_project(u - g, M) - u))
        history.append(c)
    converged = not stalled or pg_norm <= config.gradient_tolerance
    return u.reshape(shape), c, iterations, pg_norm, converged, history


def solve_ocp(model: ControlAffineModel, params: StageCostParams, config: OcpConfig, t_k: float,
              x_hat, warm_start=None) -> OcpSolution:
    """Minimize the discretized funnel MPC cost from ``(t_k, x_hat)``.

    ``warm_start`` may be a :class:`PiecewiseConstant` or an ``(N, m)`` array.
    Among the warm start, the zero control and a few constant controls the
    feasible guess with the lowest cost seeds the descent.

    Raises:
        InfeasibleStartError: ``h(x_hat)`` is not strictly inside the funnel.
        OcpInfeasibleError: no candidate start has finite cost.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    e0 = np.atleast_1d(model.h(x_hat)) - params.reference(t_k)
    if not float(np.linalg.norm(e0)) < params.funnel(t_k):
        raise InfeasibleStartError(
            f"model output error {np.linalg.norm(e0):.6g} not inside funnel {params.funnel(t_k):.6g}"
            f" at t={t_k:.6g}"
        )
    disc = _Discretization(model, params, config, t_k, x_hat)
    starts = np.stack(_candidate_starts(config, model.output_dim, warm_start))
    costs = disc.cost(starts)
    if not np.any(np.isfinite(costs)):
        starts = disc.greedy_start()[None]
        costs = disc.cost(starts)
    if not np.any(np.isfinite(costs)):
        raise OcpInfeasibleError(f"no finite-cost control found at t={t_k:.6g}")
    best = int(np.argmin(costs))
    u, c, iterations, pg_norm, converged, history = _minimize(
        disc, starts[best], float(costs[best]), config
    )
    control = PiecewiseConstant(t0=float(t_k), dt=config.interval_length, values=u)
    times, states, _ = model_rollout(
        model, t_k, x_hat, control, control.t_end, disc.h
    )
    logger.debug("ocp t=%.3f cost=%.6g iters=%d |pg|=%.3g", t_k, c, iterations, pg_norm)
    return OcpSolution(
        control=control,
        predicted_times=times,
        predicted_states=states,
        cost=c,
        converged=converged,
        iterations=iterations,
        gradient_norm=pg_norm,
        history=history,
    )


def warm_start_shift(previous: OcpSolution | PiecewiseConstant, delta: float,
                     input_bound: Optional[float] = None) -> np.ndarray:
    """Shift a control sequence left by ``delta`` and hold its last value."""
    control = previous.control if isinstance(previous, OcpSolution) else previous
    if delta > control.t_end - control.t0 + 1e-12:
        raise ValueError("delta exceeds the horizon of the previous control")
    starts = control.t0 + delta + control.dt * np.arange(control.intervals)
    values = np.array([control.values[control.index(t)] for t in starts])
    if input_bound is not None:
        values = np.clip(values, -input_bound, input_bound)
    return values
