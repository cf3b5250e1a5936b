from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from funnel_mpc.errors import InvalidModelError, MissingTransformError
from funnel_mpc.model import (
    ControlAffineModel,
    InitializationStrategy,
    InitVariant,
    PiecewiseConstant,
    in_omega,
    linear_model,
    model_rollout,
    proper_init,
)
from funnel_mpc.plant import ReactorParams, reactor_linearization

RESET_VARIANTS = (InitVariant.OUTPUT_RESET_KEEP_INTERNAL, InitVariant.OUTPUT_RESET_ZERO_INTERNAL)


@pytest.fixture
def reactor_model():
    return linear_model(*reactor_linearization())


@pytest.fixture
def skew_model():
    return linear_model(np.zeros((2, 2)), [[1.0], [0.0]], [[1.0, 1.0]])


def test_reactor_linearization_entries():
    p = ReactorParams()
    y_bar = 337.1
    a2 = math.exp(25.0 - 8700.0 / y_bar)
    a1 = a2 * 8700.0 / y_bar**2 * 0.5
    A, B, C, offset = reactor_linearization(p, y_bar)
    expected_A = [
        [209.2 * a1 - 1.25, 209.2 * a2, 0.0],
        [-a1, -a2 - 1.1, 0.0],
        [a1, a2, -1.1],
    ]
    assert np.allclose(A, expected_A, rtol=1e-12)
    assert np.allclose(offset, [-209.2 * a1 * y_bar, a1 * y_bar + 1.1, -a1 * y_bar], rtol=1e-12)
    assert np.array_equal(B.ravel(), [1.0, 0.0, 0.0])
    assert np.array_equal(C, B.T)


def test_integrator_model():
    model = linear_model([[0.0]], [[1.0]], [[1.0]])
    assert model.rhs(np.array([3.0]), np.array([2.0]))[0] == 2.0
    assert model.bif.internal_dim == 0


def test_reactor_bif_is_coordinate_split(reactor_model):
    x = np.array([300.0, 0.5, 0.4])
    y, eta = reactor_model.bif.forward(x)
    assert np.allclose(y, [300.0])
    assert np.allclose(eta, [0.5, 0.4], atol=1e-15)


def test_skew_bif_by_hand(skew_model):
    bif = skew_model.bif
    x = np.array([1.3, -0.7])
    y, eta = bif.forward(x)
    assert y[0] == pytest.approx(0.6)
    assert eta[0] == pytest.approx(-math.sqrt(2) * -0.7)
    back = bif.inverse(np.array([2.0]), np.array([1.0]))
    assert np.allclose(back, [2.0 + 1 / math.sqrt(2), -1 / math.sqrt(2)])


@pytest.mark.parametrize("name", ["reactor", "skew"])
def test_bif_round_trip_on_random_states(name, reactor_model, skew_model, rng):
    model = reactor_model if name == "reactor" else skew_model
    scale = np.array([400.0, 1.0, 1.0]) if name == "reactor" else np.array([10.0, 10.0])
    X = rng.uniform(-1, 1, size=(1000, model.state_dim)) * scale
    y, eta = model.bif.forward(X)
    assert np.max(np.linalg.norm(model.bif.inverse(y, eta) - X, axis=1)) <= 1e-9
    assert np.allclose(y, model.h(X), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, 100), st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_output_of_inverse_is_y(y, eta):
    model = linear_model(*reactor_linearization())
    x = model.bif.inverse(np.array([y]), np.array(eta))
    assert model.h(x)[0] == pytest.approx(y, abs=1e-9)
    y2, eta2 = model.bif.forward(x)
    assert np.allclose(eta2, eta, atol=1e-9)


def test_forward_of_inverse_with_zero_internal(skew_model):
    y, eta = skew_model.bif.forward(skew_model.bif.inverse(np.array([3.0]), np.zeros(1)))
    assert y[0] == pytest.approx(3.0)
    assert abs(eta[0]) <= 1e-15


def test_linear_model_rejects_singular_cb():
    with pytest.raises(InvalidModelError):
        linear_model(np.eye(2), [[1.0], [0.0]], [[0.0, 1.0]])


def test_open_loop_init_returns_prediction(reactor_model):
    x_pre = np.array([300.0, 0.5, 0.4])
    x_hat = proper_init(InitializationStrategy(), reactor_model, x_pre, [123.0])
    assert np.array_equal(x_hat, x_pre)


def test_keep_internal_on_reactor(reactor_model):
    strategy = InitializationStrategy(InitVariant.OUTPUT_RESET_KEEP_INTERNAL)
    x_hat = proper_init(strategy, reactor_model, [300.0, 0.5, 0.4], [295.0])
    assert np.allclose(x_hat, [295.0, 0.5, 0.4], atol=1e-12)


def test_zero_internal_clears_eta(skew_model):
    strategy = InitializationStrategy(InitVariant.OUTPUT_RESET_ZERO_INTERNAL)
    x_hat = proper_init(strategy, skew_model, [1.0, 2.0], [7.5])
    y, eta = skew_model.bif.forward(x_hat)
    assert y[0] == pytest.approx(7.5)
    assert np.linalg.norm(eta) <= 1e-12


@pytest.mark.parametrize("variant", RESET_VARIANTS)
@pytest.mark.parametrize("name", ["reactor", "skew"])
def test_proper_init_contract_on_random_pairs(variant, name, reactor_model, skew_model, rng):
    model = reactor_model if name == "reactor" else skew_model
    strategy = InitializationStrategy(variant, xi=0.0)
    for _ in range(100):
        x_pre = rng.normal(size=model.state_dim) * 50
        y_hat = rng.normal(size=model.output_dim) * 50
        x_hat = proper_init(strategy, model, x_pre, y_hat)
        assert np.max(np.abs(model.h(x_hat) - y_hat)) <= 1e-9
        assert in_omega(strategy, model, x_hat, x_pre, y_hat)


def test_in_omega_rejects_wrong_output(skew_model):
    strategy = InitializationStrategy(InitVariant.OUTPUT_RESET_KEEP_INTERNAL)
    assert not in_omega(strategy, skew_model, np.array([1.0, 0.0]), np.array([0.0, 1.0]), [5.0])


def test_reset_requires_transform():
    model = ControlAffineModel(
        1, 1, f=lambda x: 0 * x, g=lambda x: np.ones(np.shape(x) + (1,)), h=lambda x: x
    )
    strategy = InitializationStrategy(InitVariant.OUTPUT_RESET_ZERO_INTERNAL)
    with pytest.raises(MissingTransformError):
        proper_init(strategy, model, [0.0], [1.0])


def test_negative_xi_rejected():
    with pytest.raises(ValueError):
        InitializationStrategy(xi=-1.0)


def test_piecewise_constant_indexing():
    u = PiecewiseConstant(1.0, 0.5, [1.0, 2.0, 3.0])
    assert u.values.shape == (3, 1)
    assert u.t_end == 2.5
    assert u(1.0)[0] == 1.0
    assert u(1.5)[0] == 2.0
    assert u(2.4999)[0] == 3.0
    assert u(10.0)[0] == 3.0
    assert np.allclose(u.breakpoints(), [1.0, 1.5, 2.0, 2.5])


def test_integrator_rollout():
    model = linear_model([[0.0]], [[1.0]], [[1.0]])
    _, _, y = model_rollout(model, 0.0, [0.0], PiecewiseConstant(0.0, 0.25, np.ones(4)), 1.0, 0.01)
    assert y[-1, 0] == pytest.approx(1.0, abs=1e-9)


def test_reactor_rollout_matches_matrix_exponential(reactor_model):
    A, _, _, offset = reactor_model.linear
    x0 = np.array([270.0, 0.02, 0.9])
    # affine system as a linear one on (x, 1)
    aug = np.zeros((4, 4))
    aug[:3, :3] = A
    aug[:3, 3] = offset
    control = PiecewiseConstant(0.0, 0.05, np.zeros(15))
    times, states, _ = model_rollout(reactor_model, 0.0, x0, control, 0.75, 1e-4)
    for i in (len(times) // 3, -1):
        exact = expm(times[i] * aug) @ np.append(x0, 1.0)
        assert np.allclose(states[i], exact[:3], atol=1e-6, rtol=0)


def test_restarted_rollout_equals_single_rollout_for_constant_control(reactor_model):
    x0 = np.array([270.0, 0.02, 0.9])
    many = PiecewiseConstant(0.0, 0.05, np.full(10, 300.0))
    one = PiecewiseConstant(0.0, 0.5, [300.0])
    t1, s1, _ = model_rollout(reactor_model, 0.0, x0, many, 0.5, 1e-3)
    t2, s2, _ = model_rollout(reactor_model, 0.0, x0, one, 0.5, 1e-3)
    assert s1[-1] == pytest.approx(s2[-1], rel=1e-10)
    assert np.all(np.diff(t1) > 0)


def test_rollout_rejects_uncovered_interval(reactor_model):
    with pytest.raises(ValueError):
        model_rollout(reactor_model, 0.0, np.zeros(3), PiecewiseConstant(0.0, 0.1, [0.0]), 1.0, 0.01)
