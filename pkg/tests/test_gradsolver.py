import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from admmddp import admm, ddp, gradsolver as gs
from admmddp.admm import (AdmmOptions, AgentSpec, Composite, LinearLeq, MultiAgentProblem,
                          consensus_toy, consensus_toy_theta)
from admmddp.core import (ConfigError, QuadraticCost, ThetaLayout, WeightBinding, direct_theta,
                          double_integrator, make_linear_test_agent)
from admmddp.gradsolver import AuxLqrData


def random_aux(rng, N, n, m, p, with_ft=False):
    Hxx = np.empty((N + 1, n, n))
    Hxu = np.empty((N, n, m))
    Huu = np.empty((N, m, m))
    for k in range(N):
        S = rng.normal(size=(n + m, n + m))
        H = S @ S.T + 0.1 * np.eye(n + m)
        Hxx[k], Hxu[k], Huu[k] = H[:n, :n], H[:n, n:], H[n:, n:]
    S = rng.normal(size=(n, n))
    Hxx[N] = S @ S.T + 0.1 * np.eye(n)
    return AuxLqrData(Hxx, Hxu, Huu, rng.normal(size=(N + 1, n, p)), rng.normal(size=(N, m, p)),
                      np.eye(n) + 0.3 * rng.normal(size=(N, n, n)), rng.normal(size=(N, n, m)),
                      rng.normal(size=(N, n, p)) if with_ft else None)


def solve_all(aux):
    return (gs.aux_lqr_reuse(aux, gs.lqr_workspace(aux)), gs.aux_lqr_pmp_oracle(aux),
            gs.aux_lqr_augmented_oracle(aux))


def stacked(Xs):
    return np.concatenate([np.ravel(x) for x in Xs])


def convex_toy(box=0.6):
    prob = consensus_toy(terminal_only=True, box=box)
    agent = [2.0, 0.3, 0.3, 1.0, 1.0, 2.0]
    return prob, direct_theta(agent + agent + [0.3], prob.layout)


# ---------------------------------------------------------------------------
# matrix LQR solvers


def test_zero_forcing_gives_zero(rng):
    aux = random_aux(rng, 6, 3, 2, 4)
    aux = replace(aux, Hxt=np.zeros_like(aux.Hxt), Hut=np.zeros_like(aux.Hut))
    for X, U in solve_all(aux):
        assert np.all(X == 0) and np.all(U == 0)


def test_shape_mismatch_is_config_error(rng):
    aux = random_aux(rng, 4, 2, 1, 3)
    with pytest.raises(ConfigError):
        replace(aux, Hut=np.zeros((4, 1, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(1, 4), st.integers(1, 4), st.integers(1, 6),
       st.booleans(), st.integers(0, 2 ** 31))
def test_three_solvers_agree(N, n, m, p, with_ft, seed):
    aux = random_aux(np.random.default_rng(seed), N, n, m, p, with_ft)
    (Xr, Ur), (Xp, Up), (Xa, Ua) = solve_all(aux)
    assert np.all(Xr[0] == 0)
    ref = stacked([Xr, Ur])
    assert gs.rel_err(stacked([Xp, Up]), ref) <= 1e-8
    assert gs.rel_err(stacked([Xa, Ua]), ref) <= 1e-8


def test_augmented_oracle_carries_theta_theta_block(rng):
    N, p = 7, 5
    aux = random_aux(rng, N, 3, 2, p)
    log = []
    gs.aux_lqr_augmented_oracle(aux, instrument=log)
    assert len(log) == N
    assert all(V.shape == (p, p) for V in log)
    assert all(np.allclose(V, V.T) for V in log)


def test_scalar_lq_control_weight_sensitivity():
    N = 5
    model = make_linear_test_agent(1, 1, [[1.0]], [[1.0]])
    x_ref = np.zeros((N + 1, 1))
    u_ref = np.zeros((N, 1))

    def optimum(r):
        cost = QuadraticCost([1.0], [r], [2.0], x_ref, u_ref)
        init = model.rollout(np.array([1.0]), u_ref)
        tr, ws, _ = ddp.solve(model, ddp.AugmentedCost(cost), init, tol=1e-13)
        return tr, ws

    r = 0.7
    tr, ws = optimum(r)
    # only ℓ_u = r·u depends on θ = r
    Hxt = np.zeros((N + 1, 1, 1))
    Hut = tr.controls[:, :, None].copy()
    X, U = gs.aux_lqr_reuse(gs.agent_aux(ws, Hxt, Hut), ws)
    h = 1e-5
    fd = (optimum(r + h)[0].states - optimum(r - h)[0].states) / (2 * h)
    assert abs(X[1, 0, 0] - fd[1, 0]) <= 1e-6
    assert np.allclose(X[:, :, 0], fd, atol=1e-6)


# ---------------------------------------------------------------------------
# static QP, regularization and duals


def test_static_qp_proximal_only(rng):
    B, d, p = 4, 5, 3
    rho = 2.5
    X = rng.normal(size=(B, d, p))
    dlam = rng.normal(size=(B, d, p))
    # ∂/∂θ of the proximal gradient ρ(z - x - λ/ρ) is -(ρX + dλ)
    out = gs.aux_static_qp(np.zeros((B, d, d)), np.full(d, rho), -(rho * X + dlam), eps_reg=0.0)
    assert np.allclose(out, X + dlam / rho, atol=1e-12)


@pytest.mark.parametrize("eps", [1e-6, 1e-2, 0.5])
def test_regularize_eigen_shift(rng, eps):
    S = rng.normal(size=(6, 6))
    L = S + S.T - 3.0 * np.eye(6)
    assert np.linalg.eigvalsh(L)[0] < eps
    Lr, shift = gs.regularize(L, eps)
    assert abs(np.linalg.eigvalsh(Lr)[0] - eps) < 1e-10
    assert shift > 0
    P = S @ S.T + (eps + 1.0) * np.eye(6)
    Pr, s0 = gs.regularize(P, eps)
    assert s0 == 0 and np.allclose(Pr, P)


def test_static_qp_barrier_rho_sensitivity():
    terms = Composite(constraints=[LinearLeq([1.0], 1.0)])
    opts = AdmmOptions()

    def solve(rho):
        Z, info = admm.solve_static(terms, np.zeros((1, 1)), np.zeros(1, int), np.zeros(0),
                                    np.array([[2.0]]), np.array([rho]), opts)
        return Z, info.mu

    rho = 1.5
    Z, mu = solve(rho)
    L = admm.barrier_hessian(terms, Z, np.zeros(1, int), np.zeros(0), mu)
    # θ = ρ enters through ½ρ(z - 2)²: mixed derivative z - 2
    dz = gs.aux_static_qp(L, np.array([rho]), (Z - 2.0)[:, :, None])[0, 0, 0]
    h = 1e-5
    fd = (solve(rho + h)[0][0, 0] - solve(rho - h)[0][0, 0]) / (2 * h)
    assert abs(dz - fd) <= 1e-4 * max(1.0, abs(fd))


def test_dual_grad_update_formulas(rng):
    d = rng.normal(size=(4, 2, 3))
    X = rng.normal(size=(4, 2, 3))
    assert np.array_equal(gs.dual_grad_update(d, X, X, 2.0, np.zeros((4, 2)), 1), d)
    M = rng.normal(size=(4, 2, 3))
    r = rng.normal(size=(4, 2))
    out = gs.dual_grad_update(np.zeros_like(d), X + M, X, 2.0, r, 1)
    expect = 2.0 * M
    expect[..., 1] += r
    assert np.allclose(out, expect)
    # ρ not a θ entry: no residual column
    assert np.allclose(gs.dual_grad_update(np.zeros_like(d), X + M, X, 2.0, r, None), 2.0 * M)


# ---------------------------------------------------------------------------
# pipeline gradient


def test_gradient_iterate_invariants():
    prob = consensus_toy()
    hp = consensus_toy_theta()
    fwd = admm.run(prob, hp, 4)
    g, hist = gs.run(prob, fwd, hp)
    assert len(hist) == 4
    for it in hist:
        for X, U, Xc in zip(it.X, it.U, it.Xc):
            assert np.all(X[0] == 0)
            assert X.shape == (prob.N + 1, 2, hp.p) and U.shape == (prob.N, 1, hp.p)
            assert Xc.shape == X.shape


def test_gradient_pass_cannot_outrun_forward():
    prob = consensus_toy()
    hp = consensus_toy_theta()
    fwd = admm.run(prob, hp, 2)
    with pytest.raises(ConfigError):
        gs.run(prob, fwd, hp, a_max=3)


def test_decoupled_agent_has_zero_foreign_columns():
    base = consensus_toy()
    prob = MultiAgentProblem(base.agents, base.layout, base.N)
    hp = consensus_toy_theta()
    fwd = admm.run(prob, hp, 5)
    g, _ = gs.run(prob, fwd, hp)
    lay = prob.layout
    for i, other in ((0, "a2"), (1, "a1")):
        cols = np.concatenate([lay.index(f"{other}.{s}") for s in ("Q", "R", "QN", "rho")]
                              + [lay.index("coupling.w")])
        for arr in (g.X[i], g.U[i], g.Xc[i], g.Uc[i], g.dlam[i], g.dxi[i]):
            assert np.all(arr[..., cols] == 0)


def test_toy_pipeline_gradient_matches_finite_differences():
    prob = consensus_toy().with_options(ddp_tol=1e-12)
    hp = consensus_toy_theta()
    fwd = admm.run(prob, hp, 20)
    g, _ = gs.run(prob, fwd, hp)
    fd = gs.finite_difference_oracle(prob, hp, 20, h=1e-5)
    for key in ("X", "U", "Xc", "Uc"):
        got = stacked(getattr(g, key))
        assert gs.rel_err(got, stacked(fd[key])) <= 1e-3, key


def test_toy_pipeline_gradient_matches_centralized_oracle():
    prob = consensus_toy().with_options(ddp_tol=1e-12)
    hp = consensus_toy_theta()
    fwd = admm.run(prob, hp, 50)
    g, _ = gs.run(prob, fwd, hp)
    cen = gs.centralized_qp_oracle(prob, fwd, hp)
    assert gs.rel_err(stacked(g.X), stacked(cen.X)) <= 1e-4
    assert gs.rel_err(stacked(g.U), stacked(cen.U)) <= 1e-4
    assert cen.hessian_min_eig >= -1e-10


def test_centralized_oracle_cross_checked_by_finite_differences():
    prob = consensus_toy().with_options(ddp_tol=1e-12)
    hp = consensus_toy_theta()
    fwd = admm.run(prob, hp, 50)
    cen = gs.centralized_qp_oracle(prob, fwd, hp)
    # the converged pipeline is smooth in θ; a larger step keeps round-off out of the quotient
    fd = gs.finite_difference_oracle(prob, hp, 50, h=1e-3)
    assert gs.rel_err(stacked(cen.X), stacked(fd["X"])) <= 1e-4


def test_barrier_active_pipeline_gradient():
    prob, hp = convex_toy()
    prob = prob.with_options(ddp_tol=1e-12)
    fwd = admm.run(prob, hp, 30)
    g, _ = gs.run(prob, fwd, hp)
    cen = gs.centralized_qp_oracle(prob, fwd, hp)
    assert cen.hessian_min_eig >= -1e-10
    fd = gs.finite_difference_oracle(prob, hp, 30, h=1e-5)
    assert gs.rel_err(stacked(g.X), stacked(fd["X"])) <= 5e-2


def test_centralized_single_agent_matches_reuse():
    layout = ThetaLayout([("a.Q", 2), ("a.R", 1), ("a.QN", 2), ("a.rho", 1)])
    model = double_integrator(0.1)
    N = 12
    spec = AgentSpec("a", model, np.zeros(2), np.tile([1.0, 0.0], (N + 1, 1)), np.zeros((N, 1)),
                     WeightBinding("a.Q", "a.R", "a.QN", "a.rho"))
    prob = MultiAgentProblem([spec], layout, N, options=AdmmOptions(ddp_tol=1e-13))
    hp = direct_theta([4.0, 1.0, 0.5, 8.0, 1.0, 1.0], layout)
    cost, _ = spec.cost(hp.theta, layout)
    opt, ws, _ = ddp.solve(model, ddp.AugmentedCost(cost), model.rollout(spec.x0, spec.u_ref),
                           tol=1e-13)
    fwd = admm.run(prob, hp, 1, init=admm.initial_iterate(prob, hp, guess=[opt]))
    # no coupling terms, so no regularization of the (zero) copy Hessian either
    cen = gs.centralized_qp_oracle(prob, fwd, hp, eps_reg=0.0)
    Hxt, Hut, _ = gs._agent_theta_terms(spec, cost, opt, None, None, layout, hp.p)
    X, U = gs.aux_lqr_reuse(gs.agent_aux(ws, Hxt, Hut), ws)
    assert np.allclose(cen.X[0], X, atol=1e-10)
    assert np.allclose(cen.U[0], U, atol=1e-10)


# ---------------------------------------------------------------------------
# truncation


@pytest.fixture(scope="module")
def truncation_table():
    prob = consensus_toy()
    hp = consensus_toy_theta()
    fwd = admm.run(prob, hp, 30)
    assert fwd.report.aggregate[-1] < 1e-8
    return gs.truncation_error_check(prob, hp, levels=(1, 2, 5, 10, 20, 30), a_fp=30, fwd=fwd)


def test_truncation_full_level_is_exact(truncation_table):
    t = truncation_table
    assert np.all(t.grad_dev[-1] == 0) and np.all(t.primal_dev[-1] == 0)


def test_truncation_deviation_shrinks(truncation_table):
    tot = np.array(truncation_table.summary["grad_dev_total"])
    assert np.all(np.diff(tot) < 0)


def test_truncation_ratio_bounded(truncation_table):
    s = truncation_table.summary
    assert np.isfinite(s["max_ratio"])
    assert s["max_ratio"] < 10 * s["median_ratio"]
