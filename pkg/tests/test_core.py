import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from admmddp.core import (ConfigError, DomainError, QuadraticCost, ThetaLayout, Trajectory,
                          direct_theta, double_integrator, make_linear_test_agent, map_theta)
from admmddp import multilift as ml

from conftest import fd_jacobian, rel_close


def test_linear_agent_affine_map():
    ag = make_linear_test_agent(2, 1, np.eye(2), [[0.0], [1.0]])
    assert np.allclose(ag.step(np.array([1.0, 0.0]), np.array([1.0])), [1.0, 1.0])


def test_linear_agent_jacobian_is_A(rng):
    A = rng.normal(size=(3, 3))
    B = rng.normal(size=(3, 2))
    ag = make_linear_test_agent(3, 2, A, B)
    for _ in range(5):
        fx, fu = ag.jacobians(rng.normal(size=3), rng.normal(size=2))
        assert np.array_equal(fx, A) and np.array_equal(fu, B)
    assert ag.jac_theta(np.zeros(3), np.zeros(2)) is None


def test_double_integrator_step():
    di = double_integrator(0.1)
    assert np.allclose(di.step(np.array([0.0, 1.0]), np.array([0.0])), [0.1, 1.0])


def test_linear_agent_dimension_mismatch():
    with pytest.raises(ConfigError):
        make_linear_test_agent(2, 1, np.eye(3), np.zeros((2, 1)))
    with pytest.raises(ConfigError):
        make_linear_test_agent(2, 1, np.eye(2), np.zeros((2, 2)))


def test_trajectory_lengths():
    Trajectory(np.zeros((4, 2)), np.zeros((3, 1)))
    with pytest.raises(ConfigError):
        Trajectory(np.zeros((3, 2)), np.zeros((3, 1)))


def test_quadratic_cost_value():
    c = QuadraticCost([2.0], [4.0], [6.0], np.ones((3, 1)), np.zeros((2, 1)))
    tr = Trajectory(np.zeros((3, 1)), np.ones((2, 1)))
    # ½(2·1·2 + 4·1·2 + 6·1)
    assert c.total(tr) == pytest.approx(9.0)


def _models():
    cfg = ml.MultiliftConfig(r_g=(0.03, -0.01, 0.0))
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    return [make_linear_test_agent(3, 2, A, rng.normal(size=(3, 2))), double_integrator(0.1, 2),
            ml.LoadModel(cfg), ml.CableModel(0.1)]


def _random_point(model, rng):
    x = rng.normal(size=model.state_dim)
    u = rng.normal(size=model.control_dim)
    if isinstance(model, ml.LoadModel):
        x[6:10] /= np.linalg.norm(x[6:10])
        u[:3] *= 10
    if isinstance(model, ml.CableModel):
        x[:3] /= np.linalg.norm(x[:3])
        x[6] = abs(x[6]) + 5
    return x, u


@pytest.mark.parametrize("model", _models(), ids=lambda m: type(m).__name__)
def test_jacobians_match_central_differences(model):
    rng = np.random.default_rng(7)
    for _ in range(100):
        x, u = _random_point(model, rng)
        fx, fu = model.jacobians(x, u)
        assert rel_close(fx, fd_jacobian(lambda z: model.step(z, u), x)) <= 1e-5
        assert rel_close(fu, fd_jacobian(lambda v: model.step(x, v), u)) <= 1e-5


@pytest.mark.parametrize("model", _models(), ids=lambda m: type(m).__name__)
def test_step_is_deterministic(model):
    x, u = _random_point(model, np.random.default_rng(3))
    assert np.array_equal(model.step(x, u), model.step(x.copy(), u.copy()))


LAYOUT = ThetaLayout([("a.Q", 3), ("a.R", 2), ("a.rho", 1)])


def test_map_theta_midpoint():
    hp = map_theta(np.full(6, 0.5), LAYOUT)
    assert np.allclose(hp.theta, 500.005)
    assert np.allclose(hp.dtheta_draw, 999.99)


def test_map_theta_lower_edge():
    hp = map_theta(np.full(6, 1e-12), LAYOUT)
    assert np.allclose(hp.theta, 0.01)


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, np.nan])
def test_map_theta_domain(bad):
    raw = np.full(6, 0.5)
    raw[2] = bad
    with pytest.raises(DomainError):
        map_theta(raw, LAYOUT)


@given(st.lists(st.floats(1e-6, 1 - 1e-6), min_size=6, max_size=6),
       st.lists(st.floats(1e-6, 1 - 1e-6), min_size=6, max_size=6))
@settings(max_examples=50, deadline=None)
def test_map_theta_monotone_and_bounded(a, b):
    a, b = np.array(a), np.array(b)
    ta, tb = map_theta(a, LAYOUT).theta, map_theta(b, LAYOUT).theta
    assert np.all((ta >= 0.01) & (ta <= 1000.0))
    assert np.all(np.sign(ta - tb) == np.sign(a - b))


def test_direct_theta_roundtrip():
    raw = np.linspace(0.1, 0.9, 6)
    hp = map_theta(raw, LAYOUT)
    assert np.allclose(direct_theta(hp.theta, LAYOUT).raw, raw)


def test_layout_errors():
    with pytest.raises(ConfigError):
        ThetaLayout([("a", 1), ("a", 2)])
    with pytest.raises(ConfigError):
        LAYOUT["missing"]
