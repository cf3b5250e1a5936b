"""Funnel feedback law and the robust funnel MPC closed loop.

Plant and model are stacked into one ODE for every MPC cycle: the model is
driven by the optimal open-loop control only, the plant additionally by the
funnel feedback, which is re-evaluated at every RK4 stage.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    ClosedLoopError,
    FunnelMPCError,
    FunnelViolationError,
    InfeasibleStartError,
    IntegrationDivergedError,
)
from .model import (
    ControlAffineModel,
    InitializationStrategy,
    InitVariant,
    proper_init,
)
from .numerics import time_grid
from .ocp import OcpConfig, StageCostParams, solve_ocp, warm_start_shift
from .plant import Plant
from .signals import (
    ActivationFunction,
    FunnelFunction,
    GainPair,
    ReferenceSignal,
    relu_activation,
    standard_gains,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FunnelControllerConfig:
    gains: GainPair = field(default_factory=standard_gains)
    activation: ActivationFunction = field(default_factory=lambda: relu_activation(0.5))
    phi_floor: float = 1e-9

    def __post_init__(self):
        if not self.phi_floor > 0:
            raise ValueError("phi_floor must be positive")


@dataclass(frozen=True)
class LoopConfig:
    """Closed-loop settings.

    ``model_x0`` is the model's initial state; ``init_override(k, t_k)`` may
    return a different initialization strategy for cycle ``k``.
    """

    delta: float = 0.05
    ocp: OcpConfig = field(default_factory=OcpConfig)
    init_strategy: InitializationStrategy = field(default_factory=InitializationStrategy)
    sim_step: float = 1e-4
    t_end: float = 4.0
    fc_enabled: bool = True
    model_x0: Optional[np.ndarray] = None
    log_interval: float = 1e-3
    init_override: Optional[Callable[[int, float], Optional[InitializationStrategy]]] = None

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.ocp.horizon_T < self.delta - 1e-12:
            raise ValueError("horizon_T < delta")
        if not self.sim_step > 0 or self.sim_step > self.delta:
            raise ValueError("sim_step must lie in (0, delta]")
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")


@dataclass
class CycleRecord:
    t_k: float
    x_hat: np.ndarray
    x_pre: np.ndarray
    y_hat: np.ndarray
    cost: float
    iterations: int
    converged: bool
    # model output and adaptive funnel just before the next re-initialization
    y_m_end: Optional[np.ndarray] = None
    phi_end: float = math.nan
    y_end: Optional[np.ndarray] = None


@dataclass
class TrajectoryLog:
    """Time-indexed closed-loop record; vectors are stored row-wise."""

    output_dim: int
    times: list = field(default_factory=list)
    y: list = field(default_factory=list)
    y_m: list = field(default_factory=list)
    y_ref: list = field(default_factory=list)
    psi: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    u_fmpc: list = field(default_factory=list)
    u_fc: list = field(default_factory=list)
    u_total: list = field(default_factory=list)
    fc_active: list = field(default_factory=list)
    cycles: list = field(default_factory=list)
    wall_time: float = 0.0

    def append(self, t, y, y_m, y_ref, psi, phi, u_fmpc, u_fc, active) -> None:
        self.times.append(float(t))
        self.y.append(np.array(y, dtype=float))
        self.y_m.append(np.array(y_m, dtype=float))
        self.y_ref.append(np.array(y_ref, dtype=float))
        self.psi.append(float(psi))
        self.phi.append(float(phi))
        self.u_fmpc.append(np.array(u_fmpc, dtype=float))
        self.u_fc.append(np.array(u_fc, dtype=float))
        self.u_total.append(self.u_fmpc[-1] + self.u_fc[-1])
        self.fc_active.append(bool(active))

    def __len__(self) -> int:
        return len(self.times)

    def arrays(self) -> dict:
        """All per-sample columns as numpy arrays."""
        m = self.output_dim
        vec = lambda rows: np.array(rows, dtype=float).reshape(len(rows), m)  # noqa: E731
        return {
            "t": np.array(self.times),
            "y": vec(self.y),
            "y_M": vec(self.y_m),
            "y_ref": vec(self.y_ref),
            "psi": np.array(self.psi),
            "phi": np.array(self.phi),
            "u_fmpc": vec(self.u_fmpc),
            "u_fc": vec(self.u_fc),
            "u_total": vec(self.u_total),
            "fc_active": np.array(self.fc_active, dtype=bool),
        }


def adaptive_funnel(psi: FunnelFunction, y_m, y_ref_val, t: float, phi_floor: float = 1e-9) -> float:
    """Funnel radius left for the mismatch: ``psi(t) - |y_M - y_ref|``, floored."""
    e_m = np.asarray(y_m, dtype=float) - np.asarray(y_ref_val, dtype=float)
    phi = psi(t) - math.sqrt(float(e_m @ e_m))
    if phi < phi_floor:
        logger.warning("adaptive funnel %.3g clamped to floor at t=%.6g", phi, t)
        return phi_floor
    return phi


def funnel_control(config: FunnelControllerConfig, e_s, phi: float) -> np.ndarray:
    """Gated funnel feedback ``beta(|w|) N(alpha(|w|^2)) w`` with ``w = e_s / phi``.

    Raises:
        FunnelViolationError: if ``|e_s| >= phi``.
    """
    w = np.asarray(e_s, dtype=float) / phi
    s = math.sqrt(float(w @ w))
    if not s < 1.0:
        raise FunnelViolationError(f"mismatch {s * phi:.6g} reached adaptive funnel {phi:.6g}")
    b = config.activation.beta(s)
    if b == 0.0:
        return np.zeros_like(w)
    return (b * config.gains.surjection_n(config.gains.alpha(s * s))) * w


def _check_startup(plant, model, psi, y_ref, x0, strategy):
    y0 = plant.output(plant.initial_state)
    e0 = y0 - y_ref(0.0)
    if not np.linalg.norm(e0) < psi(0.0):
        raise InfeasibleStartError("plant output at t=0 is not inside the funnel")
    y_m0 = model.h(x0)
    margin = psi(0.0) - np.linalg.norm(y_m0 - y_ref(0.0))
    if not np.linalg.norm(y0 - y_m0) < margin:
        raise InfeasibleStartError(
            "model initial state violates |y(0) - h(x0)| < psi(0) - |h(x0) - y_ref(0)|"
        )
    if model.bif is not None:
        _, eta0 = model.bif.forward(x0)
        if np.linalg.norm(eta0) > strategy.xi:
            if strategy.variant is InitVariant.OUTPUT_RESET_ZERO_INTERNAL:
                raise InfeasibleStartError(
                    f"internal state norm {np.linalg.norm(eta0):.6g} exceeds xi={strategy.xi}"
                )
            logger.info("internal state norm %.4g exceeds xi=%.4g", np.linalg.norm(eta0), strategy.xi)


class _CoSimulation:
    """Stacked plant/model vector field for one MPC cycle."""

    def __init__(self, plant: Plant, model: ControlAffineModel, psi, y_ref, fc, fc_enabled):
        self.plant = plant
        self.model = model
        self.psi = psi
        self.y_ref = y_ref
        self.fc = fc
        self.fc_enabled = fc_enabled
        self.n_p = plant.state_dim
        self.u_fmpc = None

    def signals(self, t, xp, xm):
        """``(y, y_M, y_ref, psi, phi, u_fc)`` at one time instant."""
        y = self.plant.output(xp)
        y_m = self.model.h(xm)
        r = self.y_ref(t)
        psi = self.psi(t)
        e_m = y_m - r
        phi = psi - math.sqrt(float(e_m @ e_m))
        if phi < self.fc.phi_floor:
            logger.warning("adaptive funnel %.3g clamped to floor at t=%.6g", phi, t)
            phi = self.fc.phi_floor
        if self.fc_enabled:
            u_fc = funnel_control(self.fc, y - y_m, phi)
        else:
            u_fc = np.zeros(self.model.output_dim)
        return y, y_m, r, psi, phi, u_fc

    def rhs(self, t, z):
        xp, xm = z[: self.n_p], z[self.n_p:]
        u = self.u_fmpc
        if self.fc_enabled:
            u_fc = self.signals(t, xp, xm)[5]
            up = u + u_fc
        else:
            up = u
        return np.concatenate((self.plant.rhs(t, xp, up), self.model.rhs(xm, u)))


def _integrate_segment(cosim: _CoSimulation, z, t_a, t_b, step, log, log_every, counter):
    """Advance the stacked state over ``[t_a, t_b]``, logging every ``log_every`` steps."""
    plant = cosim.plant
    n_p = cosim.n_p
    times = time_grid(t_a, t_b, step)
    f = cosim.rhs
    for i in range(len(times) - 1):
        t = times[i]
        h = times[i + 1] - t
        k1 = f(t, z)
        k2 = f(t + 0.5 * h, z + (0.5 * h) * k1)
        k3 = f(t + 0.5 * h, z + (0.5 * h) * k2)
        k4 = f(t + h, z + h * k3)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise IntegrationDivergedError(t)
        plant.commit(times[i + 1], z[:n_p])
        counter += 1
        if counter % log_every == 0 and times[i + 1] < t_b - 1e-12:
            _log_sample(cosim, log, times[i + 1], z)
    return z, counter


def _log_sample(cosim: _CoSimulation, log: TrajectoryLog, t, z):
    n_p = cosim.n_p
    y, y_m, r, psi, phi, u_fc = cosim.signals(t, z[:n_p], z[n_p:])
    active = cosim.fc_enabled and bool(np.any(u_fc != 0.0))
    log.append(t, y, y_m, r, psi, phi, cosim.u_fmpc, u_fc, active)


def run_robust_fmpc(plant: Plant, model: ControlAffineModel, psi: FunnelFunction,
                    y_ref: ReferenceSignal, params: StageCostParams, fc: FunnelControllerConfig,
                    loop_cfg: LoopConfig) -> TrajectoryLog:
    """Robust funnel MPC: receding-horizon OCP on the model plus funnel feedback on the plant.

    Each cycle (a) re-initializes the model from the measured plant output,
    (b) solves the OCP with a shifted warm start, then (c)-(e) co-simulates
    model and plant over one time shift. With ``fc_enabled=False`` the
    optimal control is applied open loop.

    Raises:
        ClosedLoopError: wrapping the cause, the failing ``t_k`` and the partial log.
    """
    started = time.perf_counter()
    log = TrajectoryLog(output_dim=model.output_dim)
    x0 = plant.initial_state if loop_cfg.model_x0 is None else loop_cfg.model_x0
    x_pre = np.asarray(x0, dtype=float).copy()
    if x_pre.shape != (model.state_dim,):
        raise ValueError("model initial state has the wrong dimension")
    _check_startup(plant, model, psi, y_ref, x_pre, loop_cfg.init_strategy)

    plant.reset()
    cosim = _CoSimulation(plant, model, psi, y_ref, fc, loop_cfg.fc_enabled)
    xp = plant.initial_state.copy()
    delta = loop_cfg.delta
    n_cycles = max(1, int(math.ceil(loop_cfg.t_end / delta - 1e-9)))
    log_every = max(1, int(round(loop_cfg.log_interval / loop_cfg.sim_step)))
    counter = 0
    warm = None
    t_k = 0.0
    try:
        for k in range(n_cycles):
            t_k = k * delta
            t_next = min((k + 1) * delta, loop_cfg.t_end)
            strategy = loop_cfg.init_strategy
            if loop_cfg.init_override is not None:
                strategy = loop_cfg.init_override(k, t_k) or strategy
            y_hat = plant.output(xp)
            x_hat = proper_init(strategy, model, x_pre, y_hat)
            sol = solve_ocp(model, params, loop_cfg.ocp, t_k, x_hat, warm_start=warm)
            record = CycleRecord(
                t_k=t_k, x_hat=x_hat, x_pre=x_pre.copy(), y_hat=np.array(y_hat), cost=sol.cost,
                iterations=sol.iterations, converged=sol.converged,
            )
            log.cycles.append(record)

            z = np.concatenate((xp, x_hat))
            cuts = [t for t in sol.control.breakpoints() if t_k < t < t_next - 1e-12]
            edges = [t_k, *cuts, t_next]
            for j, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
                cosim.u_fmpc = sol.control(a).copy()
                if j == 0:
                    _log_sample(cosim, log, a, z)
                elif counter % log_every == 0:
                    _log_sample(cosim, log, a, z)
                z, counter = _integrate_segment(
                    cosim, z, a, b, loop_cfg.sim_step, log, log_every, counter
                )
            xp, x_pre = z[: plant.state_dim].copy(), z[plant.state_dim:].copy()
            y_end, y_m_end, _, _, phi_end, _ = cosim.signals(t_next, xp, x_pre)
            record.y_end, record.y_m_end, record.phi_end = y_end, y_m_end, phi_end
            warm = warm_start_shift(sol, delta, loop_cfg.ocp.input_bound_M)
        _log_sample(cosim, log, loop_cfg.t_end, z)
    except FunnelMPCError as exc:
        log.wall_time = time.perf_counter() - started
        raise ClosedLoopError(exc, t_k, log) from exc
    log.wall_time = time.perf_counter() - started
    return log


def run_funnel_control(plant: Plant, reference: ReferenceSignal, funnel: FunnelFunction,
                       fc: FunnelControllerConfig, t_end: float, sim_step: float,
                       log_interval: float = 1e-3) -> TrajectoryLog:
    """Model-free funnel feedback alone, tracking ``reference`` inside ``funnel``.

    The log's ``y_M`` column holds the reference and ``phi`` equals ``psi``.
    """
    started = time.perf_counter()
    plant.reset()
    log = TrajectoryLog(output_dim=plant.output_dim)
    m = plant.output_dim
    zero = np.zeros(m)

    def feedback(t, x):
        return funnel_control(fc, plant.output(x) - reference(t), funnel(t))

    def rhs(t, x):
        return plant.rhs(t, x, feedback(t, x))

    def record(t, x):
        u = feedback(t, x)
        log.append(t, plant.output(x), reference(t), reference(t), funnel(t), funnel(t), zero, u,
                   bool(np.any(u != 0.0)))

    times = time_grid(0.0, t_end, sim_step)
    log_every = max(1, int(round(log_interval / sim_step)))
    x = plant.initial_state.copy()
    record(0.0, x)
    for i in range(len(times) - 1):
        t, h = times[i], times[i + 1] - times[i]
        k1 = rhs(t, x)
        k2 = rhs(t + 0.5 * h, x + (0.5 * h) * k1)
        k3 = rhs(t + 0.5 * h, x + (0.5 * h) * k2)
        k4 = rhs(t + h, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        plant.commit(times[i + 1], x)
        if (i + 1) % log_every == 0 or i + 2 == len(times):
            record(times[i + 1], x)
    log.wall_time = time.perf_counter() - started
    return log
