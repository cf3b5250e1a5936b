from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.linalg import expm

from funnel_mpc.controller import FunnelControllerConfig, run_funnel_control
from funnel_mpc.errors import InvalidPlantError, PlantDomainError
from funnel_mpc.model import linear_model
from funnel_mpc.plant import (
    REACTOR_INITIAL_STATE,
    ReactorParams,
    delayed_output_plant,
    linear_operator_plant,
    plant_from_model,
    reactor_plant,
    simulate_plant,
)
from funnel_mpc.signals import constant_reference, funnel_exp

# evaluated once by hand from the reactor equations at (270, 0.02, 0.9), u = 0
Y_DOT_AT_START = -337.4969449352611
X1_DOT_AT_START = 1.0779853964400627


def test_reactor_defaults():
    p = ReactorParams()
    assert (p.b, p.c1, p.c2, p.d, p.q, p.k1, p.x1_in, p.x2_in) == (
        209.2, -1.0, 1.0, 1.1, 1.25, 8700.0, 1.0, 0.0
    )
    assert p.k0 == pytest.approx(math.exp(25.0), rel=1e-15)
    assert REACTOR_INITIAL_STATE == (270.0, 0.02, 0.9)


def test_reactor_rhs_at_initial_state():
    plant = reactor_plant()
    f = plant.rhs(0.0, plant.initial_state, np.array([0.0]))
    assert f[0] == pytest.approx(Y_DOT_AT_START, rel=1e-12)
    assert f[1] == pytest.approx(X1_DOT_AT_START, rel=1e-12)
    assert plant.output(plant.initial_state)[0] == 270.0


def test_reactor_without_reactant():
    plant = reactor_plant()
    f = plant.rhs(0.0, np.array([300.0, 0.0, 0.4]), np.array([5.0]))
    assert f[0] == pytest.approx(-1.25 * 300.0 + 5.0)
    assert f[1] == pytest.approx(1.1 * 1.0)
    assert f[2] == pytest.approx(-1.1 * 0.4)


def test_reactor_domain_and_parameter_checks():
    plant = reactor_plant()
    with pytest.raises(PlantDomainError):
        plant.rhs(0.0, np.array([-1.0, 0.1, 0.1]), np.array([0.0]))
    with pytest.raises(InvalidPlantError):
        ReactorParams(b=-1.0)
    with pytest.raises(InvalidPlantError):
        reactor_plant(initial=[0.0, 0.0, 0.0])


def test_linear_integrator_plant():
    plant = linear_operator_plant([[0.0]], [[1.0]], [[1.0]], [0.0])
    times, states = simulate_plant(plant, lambda t, x: 1.0, 2.0, 0.01)
    assert np.allclose(states[:, 0], times, atol=1e-12)


def test_hurwitz_linear_plant_matches_expm():
    A = np.array([[-1.0, 2.0], [0.0, -3.0]])
    plant = linear_operator_plant(A, [[1.0], [0.0]], [[1.0, 0.0]], [1.0, 1.0])
    assert np.all(np.linalg.eigvals(A).real < 0)
    times, states = simulate_plant(plant, lambda t, x: 0.0, 3.0, 1e-3)
    assert np.allclose(states[-1], expm(3.0 * A) @ [1.0, 1.0], atol=1e-10)
    assert np.all(np.diff(np.linalg.norm(states, axis=1)[::100]) < 0)


def test_linear_plant_rejects_singular_cb():
    with pytest.raises(InvalidPlantError):
        linear_operator_plant(np.eye(2), [[1.0], [0.0]], [[0.0, 1.0]], [0.0, 0.0])


def test_matched_disturbance_is_compensated_by_funnel_feedback():
    A = np.array([[0.5, 1.0], [0.0, -2.0]])
    plant = linear_operator_plant(A, [[1.0], [0.0]], [[1.0, 0.0]], [0.0, 1.0],
                                  matched_disturbance=lambda t: math.sin(t))
    psi = funnel_exp(2.0, 1.0, 0.2)
    log = run_funnel_control(plant, constant_reference([1.0]), psi, FunnelControllerConfig(),
                             t_end=5.0, sim_step=1e-4)
    cols = log.arrays()
    err = np.abs(cols["y"][:, 0] - 1.0)
    assert np.all(err < cols["psi"])
    assert cols["fc_active"].any()


def test_zero_delay_returns_base():
    base = linear_operator_plant([[-1.0]], [[1.0]], [[1.0]], [1.0])
    assert delayed_output_plant(base, 0.0) is base


def test_delay_method_of_steps():
    base = linear_operator_plant([[-1.0]], [[1.0]], [[1.0]], [1.0])
    plant = delayed_output_plant(base, 0.1)
    times, states = simulate_plant(plant, lambda t, x: 0.0, 0.2, 1e-3)
    i = int(np.argmin(np.abs(times - 0.1)))
    assert states[i, 0] == pytest.approx(0.9, abs=1e-3)
    # second interval: y(t) = 0.9 - (t - 0.1) + (t - 0.1)^2 / 2
    assert states[-1, 0] == pytest.approx(0.9 - 0.1 + 0.005, abs=1e-3)


def test_delay_reset_allows_repeatable_runs():
    base = linear_operator_plant([[-1.0]], [[1.0]], [[1.0]], [1.0])
    plant = delayed_output_plant(base, 0.1)
    _, first = simulate_plant(plant, lambda t, x: 0.0, 0.3, 1e-3)
    _, second = simulate_plant(plant, lambda t, x: 0.0, 0.3, 1e-3)
    assert np.array_equal(first, second)


def test_plant_from_model_uses_model_dynamics():
    model = linear_model([[0.0]], [[2.0]], [[1.0]], [1.0])
    plant = plant_from_model(model, [0.5])
    assert plant.rhs(0.0, np.array([0.5]), np.array([1.0]))[0] == pytest.approx(3.0)
    assert plant.output(np.array([0.5]))[0] == 0.5


def test_delay_rejects_negative():
    base = linear_operator_plant([[-1.0]], [[1.0]], [[1.0]], [1.0])
    with pytest.raises(InvalidPlantError):
        delayed_output_plant(base, -0.1)
