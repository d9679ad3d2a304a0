import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings, strategies as st

from admmddp import ddp
from admmddp.core import QuadraticCost, Trajectory, double_integrator, make_linear_test_agent


def scalar_problem(N=1):
    model = make_linear_test_agent(1, 1, [[1.0]], [[1.0]])
    cost = QuadraticCost([1.0], [1.0], [1.0], np.zeros((N + 1, 1)), np.zeros((N, 1)))
    return model, cost


def dense_lq_oracle(model, cost, x0):
    """Stack all states and controls and solve the equality-constrained QP."""
    A, B = model.A, model.B
    n, m, N = model.state_dim, model.control_dim, cost.N
    nz = (N + 1) * n + N * m
    H = np.zeros((nz, nz))
    g = np.zeros(nz)
    xi = lambda k: slice(k * n, (k + 1) * n)
    ui = lambda k: slice((N + 1) * n + k * m, (N + 1) * n + (k + 1) * m)
    for k in range(N + 1):
        w = cost.QN if k == N else cost.Q
        H[xi(k), xi(k)] = np.diag(w)
        g[xi(k)] = -w * cost.x_ref[k]
    for k in range(N):
        H[ui(k), ui(k)] = np.diag(cost.R)
        g[ui(k)] = -cost.R * cost.u_ref[k]
    rows = []
    rhs = []
    C0 = np.zeros((n, nz))
    C0[:, xi(0)] = np.eye(n)
    rows.append(C0)
    rhs.append(x0)
    for k in range(N):
        C = np.zeros((n, nz))
        C[:, xi(k + 1)] = np.eye(n)
        C[:, xi(k)] = -A
        C[:, ui(k)] = -B
        rows.append(C)
        rhs.append(np.zeros(n))
    C = np.vstack(rows)
    KKT = np.block([[H, C.T], [C, np.zeros((C.shape[0], C.shape[0]))]])
    sol = np.linalg.solve(KKT, np.concatenate([-g, np.concatenate(rhs)]))
    z = sol[:nz]
    return z[:(N + 1) * n].reshape(N + 1, n), z[(N + 1) * n:].reshape(N, m)


def test_zero_nominal_is_stationary():
    model = double_integrator(0.1)
    cost = QuadraticCost([1.0, 1.0], [1.0], [1.0, 1.0], np.zeros((6, 2)), np.zeros((5, 1)))
    ws = ddp.backward_pass(model, ddp.AugmentedCost(cost), model.rollout(np.zeros(2), np.zeros((5, 1))))
    assert np.all(ws.k == 0)


def test_one_step_scalar_riccati():
    model, cost = scalar_problem()
    nominal = model.rollout(np.array([1.0]), np.zeros((1, 1)))
    ws = ddp.backward_pass(model, ddp.AugmentedCost(cost), nominal)
    assert ws.Vxx[1, 0, 0] == pytest.approx(1.0)
    assert ws.Quu[0, 0, 0] == pytest.approx(2.0)
    assert ws.K[0, 0, 0] == pytest.approx(-0.5)


def test_one_step_scalar_optimum():
    model, cost = scalar_problem()
    tr, ws, rep = ddp.solve(model, ddp.AugmentedCost(cost), model.rollout([1.0], np.zeros((1, 1))))
    best = scipy.optimize.minimize_scalar(lambda u: 0.5 * (1 + u * u) + 0.5 * (1 + u) ** 2)
    assert tr.controls[0, 0] == pytest.approx(best.x, abs=1e-8)
    assert tr.controls[0, 0] == pytest.approx(-0.5)


def test_ilqr_and_ddp_agree_on_linear_model(rng):
    model = make_linear_test_agent(3, 2, rng.normal(size=(3, 3)) * 0.5, rng.normal(size=(3, 2)))
    cost = QuadraticCost(np.ones(3), np.ones(2), np.ones(3), rng.normal(size=(8, 3)), np.zeros((7, 2)))
    nom = model.rollout(rng.normal(size=3), rng.normal(size=(7, 2)))
    a = ddp.backward_pass(model, ddp.AugmentedCost(cost), nom, mode="ilqr")
    b = ddp.backward_pass(model, ddp.AugmentedCost(cost), nom, mode="ddp")
    assert np.allclose(a.Vxx, b.Vxx, atol=1e-12) and np.allclose(a.K, b.K, atol=1e-12)


def test_forward_pass_zero_feedforward_returns_nominal():
    model, cost = scalar_problem(3)
    aug = ddp.AugmentedCost(QuadraticCost([1.0], [1.0], [1.0], np.zeros((4, 1)), np.zeros((3, 1))))
    nom = model.rollout([0.0], np.zeros((3, 1)))
    ws = ddp.backward_pass(model, aug, nom)
    tr, J, alpha = ddp.forward_pass(model, nom, ws, aug)
    assert alpha is None and tr is nom


def test_lq_converges_in_one_sweep(rng):
    model = double_integrator(0.1, 2)
    cost = QuadraticCost(np.ones(4), np.ones(2) * 0.1, np.ones(4) * 5, rng.normal(size=(11, 4)),
                         np.zeros((10, 2)))
    tr, ws, rep = ddp.solve(model, ddp.AugmentedCost(cost), model.rollout(np.zeros(4), np.zeros((10, 2))))
    assert rep.converged and rep.iterations == 1


def test_equilibrium_start_needs_no_change():
    model = double_integrator(0.1)
    x0 = np.array([0.3, 0.0])
    cost = QuadraticCost([1.0, 1.0], [1.0], [1.0, 1.0], np.tile(x0, (6, 1)), np.zeros((5, 1)))
    tr, ws, rep = ddp.solve(model, ddp.AugmentedCost(cost), model.rollout(x0, np.zeros((5, 1))))
    assert rep.iterations == 0 and np.all(tr.controls == 0)


@st.composite
def lq_instances(draw):
    seed = draw(st.integers(0, 10 ** 6))
    r = np.random.default_rng(seed)
    n = draw(st.integers(1, 4))
    m = draw(st.integers(1, 4))
    N = draw(st.integers(1, 20))
    A = np.eye(n) + 0.3 * r.normal(size=(n, n))
    model = make_linear_test_agent(n, m, A, r.normal(size=(n, m)))
    cost = QuadraticCost(r.uniform(0.1, 5, n), r.uniform(0.1, 5, m), r.uniform(0.1, 5, n),
                         r.normal(size=(N + 1, n)), r.normal(size=(N, m)))
    return model, cost, r.normal(size=n)


@given(lq_instances())
@settings(max_examples=30, deadline=None)
def test_lq_matches_dense_qp(inst):
    model, cost, x0 = inst
    tr, ws, rep = ddp.solve(model, ddp.AugmentedCost(cost), model.rollout(x0, np.zeros_like(cost.u_ref)))
    X, U = dense_lq_oracle(model, cost, x0)
    scale = max(1.0, np.abs(X).max(), np.abs(U).max())
    assert np.abs(tr.states - X).max() <= 1e-8 * scale
    assert np.abs(tr.controls - U).max() <= 1e-8 * scale
    # first-order optimality of the returned workspace
    assert np.all(np.linalg.norm(ws.Qu, axis=1) <= 10 * 1e-6)


@given(lq_instances())
@settings(max_examples=20, deadline=None)
def test_workspace_invariants(inst):
    model, cost, x0 = inst
    _, ws, _ = ddp.solve(model, ddp.AugmentedCost(cost), model.rollout(x0, np.zeros_like(cost.u_ref)))
    I = np.eye(model.control_dim)
    for k in range(ws.N):
        assert np.allclose(ws.Quu[k], ws.Quu[k].T)
        assert np.all(np.linalg.eigvalsh(ws.Quu[k]) > 0)
        assert np.abs(ws.Quu[k] @ ws.Quu_inv[k] - I).max() <= 1e-10
    assert np.abs(ws.Vxx - np.swapaxes(ws.Vxx, 1, 2)).max() <= 1e-12


def test_cost_nonincreasing_on_nonlinear_model():
    from admmddp import multilift as ml
    model = ml.CableModel(0.1)
    N = 15
    x_ref = np.zeros((N + 1, 8))
    x_ref[:, :3] = np.array([0.3, 0.0, 1.0]) / np.linalg.norm([0.3, 0.0, 1.0])
    x_ref[:, 6] = 9.0
    cost = QuadraticCost(np.r_[100, 100, 100, 1, 1, 1, 1, 1], np.ones(4), np.full(8, 100.0), x_ref,
                         np.zeros((N, 4)))
    x0 = np.r_[0.0, 0.0, 1.0, 0, 0, 0, 9.0, 0]
    _, _, rep = ddp.solve(model, ddp.AugmentedCost(cost), model.rollout(x0, np.zeros((N, 4))))
    assert rep.converged
    assert np.all(np.diff(rep.costs) <= 1e-12)


def test_augmented_cost_reduces_to_base():
    model, cost = scalar_problem(3)
    tr = model.rollout([1.0], np.full((3, 1), 0.2))
    aug = ddp.AugmentedCost(cost, tr.states, tr.controls, None, None, rho=7.0)
    assert aug.total(tr) == pytest.approx(cost.total(tr))


def test_penalty_pulls_toward_copies_monotonically():
    model = make_linear_test_agent(1, 1, [[1.0]], [[1.0]])
    N = 5
    cost = QuadraticCost([1.0], [1.0], [1.0], np.zeros((N + 1, 1)), np.zeros((N, 1)))
    uc = np.zeros((N, 1))
    uc[0] = -0.5
    xc = model.rollout([1.0], uc).states   # 1, 0.5, 0.5, ...
    dists = []
    for rho in (1.0, 10.0, 100.0, 1000.0):
        aug = ddp.AugmentedCost(cost, xc, uc, None, None, rho)
        tr, _, _ = ddp.solve(model, aug, model.rollout([1.0], np.zeros((N, 1))))
        dists.append(np.linalg.norm(tr.states - xc) + np.linalg.norm(tr.controls - uc))
    assert all(a > b for a, b in zip(dists, dists[1:]))
    assert dists[-1] < 0.01 * dists[0]
