from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from funnel_mpc.controller import (
    FunnelControllerConfig,
    LoopConfig,
    TrajectoryLog,
    adaptive_funnel,
    funnel_control,
    run_funnel_control,
    run_robust_fmpc,
)
from funnel_mpc.errors import ClosedLoopError, FunnelViolationError, InfeasibleStartError
from funnel_mpc.model import InitializationStrategy, InitVariant, linear_model
from funnel_mpc.ocp import OcpConfig, StageCostParams
from funnel_mpc.plant import Plant, linear_operator_plant, plant_from_model
from funnel_mpc.signals import constant_funnel, constant_reference, funnel_exp, ramp_reference

FC = FunnelControllerConfig()


def test_adaptive_funnel_examples():
    psi = funnel_exp(20, 2, 4)
    assert adaptive_funnel(psi, [5.0], [5.0], 0.0) == 24.0
    assert adaptive_funnel(psi, [10.0], [0.0], 0.0) == pytest.approx(14.0)
    assert adaptive_funnel(psi, [24.0], [0.0], 0.0, phi_floor=1e-9) == 1e-9


def test_funnel_control_examples():
    assert np.array_equal(funnel_control(FC, np.zeros(1), 1.0), np.zeros(1))
    assert np.array_equal(funnel_control(FC, np.array([0.4]), 1.0), np.zeros(1))
    u = funnel_control(FC, np.array([0.8]), 1.0)
    assert u[0] == pytest.approx(-(0.3) * (1 / 0.36) * 0.8, rel=1e-12)
    assert u[0] == pytest.approx(-0.6667, abs=1e-4)


def test_funnel_control_scales_with_phi():
    assert funnel_control(FC, np.array([1.6]), 2.0) == pytest.approx(funnel_control(FC, [0.8], 1.0))


def test_funnel_control_vector_acts_along_error():
    e = np.array([0.6, 0.6])
    u = funnel_control(FC, e, 1.0)
    assert np.allclose(u[0], u[1]) and u[0] < 0


def test_funnel_control_rejects_boundary():
    with pytest.raises(FunnelViolationError):
        funnel_control(FC, np.array([1.0]), 1.0)


def test_loop_config_validation():
    with pytest.raises(ValueError, match="horizon_T < delta"):
        LoopConfig(delta=0.05, ocp=OcpConfig(horizon_T=0.01, control_intervals=1))
    with pytest.raises(ValueError):
        LoopConfig(delta=0.0)
    with pytest.raises(ValueError):
        LoopConfig(delta=0.05, sim_step=0.1)
    with pytest.raises(ValueError):
        FunnelControllerConfig(phi_floor=0.0)


def test_log_total_input_is_sum():
    log = TrajectoryLog(output_dim=2)
    log.append(0.0, [1, 2], [1, 2], [0, 0], 3.0, 3.0, [1.0, -1.0], [0.5, 0.25], True)
    cols = log.arrays()
    assert np.array_equal(cols["u_total"], [[1.5, -0.75]])
    assert cols["y"].shape == (1, 2)


def _scalar_setup(t_end=1.0, fc_enabled=True, variant=InitVariant.OPEN_LOOP, plant_a=0.5):
    model = linear_model([[0.0]], [[1.0]], [[1.0]])
    plant = linear_operator_plant([[plant_a]], [[1.2]], [[1.0]], [0.0],
                                  matched_disturbance=lambda t: 0.5 * np.sin(3 * t))
    psi = funnel_exp(1.0, 1.0, 0.3)
    ref = ramp_reference([0.0], [1.0], 0.5)
    params = StageCostParams(1e-4, psi, ref)
    loop = LoopConfig(
        delta=0.1,
        ocp=OcpConfig(horizon_T=0.3, control_intervals=3, input_bound_M=20.0),
        init_strategy=InitializationStrategy(variant),
        sim_step=1e-3,
        t_end=t_end,
        fc_enabled=fc_enabled,
        log_interval=1e-2,
    )
    return plant, model, psi, ref, params, loop


@pytest.mark.parametrize(
    "variant", [InitVariant.OPEN_LOOP, InitVariant.OUTPUT_RESET_KEEP_INTERNAL]
)
def test_mismatched_scalar_loop_stays_in_funnel(variant):
    plant, model, psi, ref, params, loop = _scalar_setup(variant=variant)
    log = run_robust_fmpc(plant, model, psi, ref, params, FC, loop)
    cols = log.arrays()
    err = np.abs(cols["y"] - cols["y_ref"])[:, 0]
    assert np.all(err < cols["psi"])
    assert np.all(np.abs(cols["y"] - cols["y_M"])[:, 0] < cols["phi"])
    assert np.all(np.abs(cols["u_fmpc"]) <= 20.0)
    assert np.array_equal(cols["u_total"], cols["u_fmpc"] + cols["u_fc"])
    assert np.all(np.diff(cols["t"]) > 0)
    assert cols["t"][0] == 0.0 and cols["t"][-1] == pytest.approx(1.0)
    assert len(log.cycles) == 10


def test_disabled_feedback_logs_zero_input():
    plant, model, psi, ref, params, loop = _scalar_setup(t_end=0.3, fc_enabled=False, plant_a=0.0)
    log = run_robust_fmpc(plant, model, psi, ref, params, FC, loop)
    cols = log.arrays()
    assert not cols["fc_active"].any()
    assert np.all(cols["u_fc"] == 0.0)


def test_identical_plant_needs_no_feedback():
    model = linear_model([[0.3, 0.0], [1.0, -1.0]], [[1.0], [0.0]], [[1.0, 0.0]])
    plant = plant_from_model(model, [0.2, 0.0])
    psi = constant_funnel(1.0)
    ref = constant_reference([0.0])
    loop = LoopConfig(delta=0.1, ocp=OcpConfig(horizon_T=0.3, control_intervals=3,
                                               input_bound_M=5.0),
                      sim_step=1e-3, t_end=0.5)
    log = run_robust_fmpc(plant, model, psi, ref, StageCostParams(1e-4, psi, ref), FC, loop)
    cols = log.arrays()
    assert np.max(np.abs(cols["u_fc"])) <= 1e-8
    assert np.max(np.abs(cols["y"] - cols["y_M"])) <= 1e-12


def test_start_outside_funnel_rejected():
    plant, model, psi, ref, params, loop = _scalar_setup()
    plant.initial_state = np.array([5.0])
    with pytest.raises(InfeasibleStartError):
        run_robust_fmpc(plant, model, psi, ref, params, FC, loop)


def test_zero_internal_requires_small_internal_state():
    model = linear_model([[0.0, 0.0], [0.0, -1.0]], [[1.0], [0.0]], [[1.0, 0.0]])
    plant = plant_from_model(model, [0.0, 3.0])
    psi = constant_funnel(1.0)
    ref = constant_reference([0.0])
    loop = LoopConfig(
        delta=0.1,
        ocp=OcpConfig(horizon_T=0.2, control_intervals=2, input_bound_M=5.0),
        init_strategy=InitializationStrategy(InitVariant.OUTPUT_RESET_ZERO_INTERNAL, xi=1.0),
        sim_step=1e-3,
        t_end=0.2,
    )
    with pytest.raises(InfeasibleStartError):
        run_robust_fmpc(plant, model, psi, ref, StageCostParams(1e-4, psi, ref), FC, loop)


def test_failure_mid_run_keeps_partial_log():
    plant, model, psi, ref, params, loop = _scalar_setup()
    base_rhs = plant.rhs

    def failing(t, x, u):
        if t > 0.25:
            return np.array([np.inf])
        return base_rhs(t, x, u)

    broken = Plant(1, 1, failing, plant.output, plant.initial_state)
    with pytest.raises(ClosedLoopError) as info:
        run_robust_fmpc(broken, model, psi, ref, params, FC, loop)
    assert info.value.t_k == pytest.approx(0.2)
    assert len(info.value.log) > 0
    assert info.value.log.times[-1] <= 0.3


def test_init_override_is_consulted():
    seen = []

    def override(k, t_k):
        seen.append(k)
        return InitializationStrategy(InitVariant.OUTPUT_RESET_KEEP_INTERNAL) if k == 1 else None

    plant, model, psi, ref, params, loop = _scalar_setup(t_end=0.3)
    log = run_robust_fmpc(plant, model, psi, ref, params, FC, replace(loop, init_override=override))
    assert seen == [0, 1, 2]
    assert log.cycles[1].x_hat == pytest.approx(log.cycles[1].y_hat)


def test_standalone_funnel_control_tracks_reference():
    plant = linear_operator_plant([[1.0]], [[1.0]], [[1.0]], [0.0])
    psi = funnel_exp(2.0, 1.0, 0.1)
    log = run_funnel_control(plant, ramp_reference([0.0], [1.0], 1.0), psi, FC, 3.0, 1e-4)
    cols = log.arrays()
    assert np.all(np.abs(cols["y"] - cols["y_ref"])[:, 0] < cols["psi"])
    assert cols["t"][-1] == pytest.approx(3.0)
