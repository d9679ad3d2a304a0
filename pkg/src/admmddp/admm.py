"""Consensus ADMM over DDP agents with a coupled static subproblem.

One iteration is: every agent solves its augmented tracking problem with
DDP; the safe copies of all agents are then re-optimized stage by stage
under the coupling costs and inequality constraints (log-barrier Newton);
finally the duals take a gradient step on the consensus residual.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import ddp
from .core import QuadraticCost, SolverError, Trajectory, WeightBinding

log = logging.getLogger(__name__)


class InfeasibleError(SolverError):
    pass


# ---------------------------------------------------------------------------
# stage terms: smooth coupling costs and inequality constraints


class StageTerms:
    """Coupling cost c(z, θ) and inequalities g(z) < 0 over stacked copies.

    Everything is batched: Z has shape (B, d) and `ks` holds the stage index
    of each row. `ineq` returns values (order 0), plus Jacobians (order 1),
    plus Hessians (order 2).
    """

    n_extra = 0
    names: tuple = ()

    def cost(self, Z, ks, theta, order=2):
        B, d = Z.shape
        if order == 0:
            return np.zeros(B)
        return np.zeros(B), np.zeros((B, d)), np.zeros((B, d, d))

    def cost_theta(self, Z, ks, theta):
        """∂²c/∂z∂θ with shape (B, d, p), or None when c does not depend on θ."""
        return None

    def ineq(self, Z, ks, order=2):
        B, d = Z.shape
        out = (np.zeros((B, 0)), np.zeros((B, 0, d)), np.zeros((B, 0, d, d)))
        return out[0] if order == 0 else out[:order + 1]

    @property
    def n_ineq(self):
        return len(self.names)

    def barrier_value(self, Z, ks, theta, mu):
        """c - μ Σ ln(-g) per row; +inf where some g ≥ 0."""
        c = self.cost(Z, ks, theta, 0)
        if not self.n_ineq:
            return c
        g = self.ineq(Z, ks, 0)
        feas = np.all(g < 0, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            val = c - mu * np.sum(np.log(np.where(g < 0, -g, 1.0)), axis=1)
        return np.where(feas, val, np.inf)

    def barrier(self, Z, ks, theta, mu):
        """Value, gradient and Hessian of c - μ Σ ln(-g) (rows must be strictly feasible)."""
        val, grad, hess = self.cost(Z, ks, theta, 2)
        if self.n_ineq:
            g, gj, gh = self.ineq(Z, ks, 2)
            inv = 1.0 / g
            val = val - mu * np.sum(np.log(-g), axis=1)
            grad = grad - mu * np.einsum("bc,bcd->bd", inv, gj)
            hess = hess + mu * (np.einsum("bc,bcd,bce->bde", inv * inv, gj, gj)
                                - np.einsum("bc,bcde->bde", inv, gh))
        return val, grad, hess


class Composite(StageTerms):
    """Sum of simple primitives, each acting on index subsets of z."""

    def __init__(self, costs=(), constraints=(), n_extra=0):
        self.costs = list(costs)
        self.constraints = list(constraints)
        self.n_extra = n_extra
        self.names = tuple(c.name for c in self.constraints)

    def cost(self, Z, ks, theta, order=2):
        B, d = Z.shape
        val = np.zeros(B)
        if order == 0:
            for c in self.costs:
                val += c.value(Z, theta)
            return val
        grad = np.zeros((B, d))
        hess = np.zeros((B, d, d))
        for c in self.costs:
            v, g, h = c.derivs(Z, theta)
            val += v
            grad += g
            hess += h
        return val, grad, hess

    def cost_theta(self, Z, ks, theta):
        out = None
        for c in self.costs:
            ct = c.theta_derivs(Z, theta)
            if ct is not None:
                out = ct if out is None else out + ct
        return out

    def ineq(self, Z, ks, order=2):
        B, d = Z.shape
        if not self.constraints:
            return super().ineq(Z, ks, order)
        if order == 0:
            return np.stack([c.value(Z) for c in self.constraints], axis=1)
        vals, grads, hess = zip(*(c.derivs(Z) for c in self.constraints))
        out = (np.stack(vals, 1), np.stack(grads, 1), np.stack(hess, 1))
        return out[:order + 1]


def _sel(d, idx):
    S = np.zeros((len(idx), d))
    S[np.arange(len(idx)), idx] = 1.0
    return S


class PairPenalty:
    """w/2·|z[i] - z[j]|²; w is a constant or a θ entry."""

    def __init__(self, i_idx, j_idx, weight=1.0, theta_col=None):
        self.i = np.asarray(i_idx)
        self.j = np.asarray(j_idx)
        self.weight = weight
        self.theta_col = theta_col

    def _w(self, theta):
        return theta[self.theta_col] if self.theta_col is not None else self.weight

    def value(self, Z, theta):
        r = Z[:, self.i] - Z[:, self.j]
        return 0.5 * self._w(theta) * np.sum(r * r, axis=1)

    def derivs(self, Z, theta):
        B, d = Z.shape
        w = self._w(theta)
        D = _sel(d, self.i) - _sel(d, self.j)
        r = Z[:, self.i] - Z[:, self.j]
        return (0.5 * w * np.sum(r * r, axis=1), w * r @ D,
                np.broadcast_to(w * D.T @ D, (B, d, d)).copy())

    def theta_derivs(self, Z, theta):
        if self.theta_col is None:
            return None
        B, d = Z.shape
        D = _sel(d, self.i) - _sel(d, self.j)
        out = np.zeros((B, d, theta.size))
        out[:, :, self.theta_col] = (Z[:, self.i] - Z[:, self.j]) @ D
        return out


class LinearLeq:
    """a·z - b ≤ 0."""

    def __init__(self, a, b, name="linear"):
        self.a = np.asarray(a, float)
        self.b = float(b)
        self.name = name

    def value(self, Z):
        return Z @ self.a - self.b

    def derivs(self, Z):
        B, d = Z.shape
        return (self.value(Z), np.broadcast_to(self.a, (B, d)).copy(), np.zeros((B, d, d)))


class MinSeparation:
    """d_min² - |z[i] - z[j]|² ≤ 0 (j may be a fixed point instead)."""

    def __init__(self, i_idx, j_idx=None, d_min=1.0, point=None, name="separation"):
        self.i = np.asarray(i_idx)
        self.j = None if j_idx is None else np.asarray(j_idx)
        self.point = None if point is None else np.asarray(point, float)
        self.d_min = float(d_min)
        self.name = name

    def _r(self, Z):
        return Z[:, self.i] - (Z[:, self.j] if self.j is not None else self.point)

    def value(self, Z):
        r = self._r(Z)
        return self.d_min ** 2 - np.sum(r * r, axis=1)

    def derivs(self, Z):
        B, d = Z.shape
        D = _sel(d, self.i)
        if self.j is not None:
            D = D - _sel(d, self.j)
        r = self._r(Z)
        return (self.d_min ** 2 - np.sum(r * r, axis=1), -2.0 * r @ D,
                np.broadcast_to(-2.0 * D.T @ D, (B, d, d)).copy())


# ---------------------------------------------------------------------------
# problem description


@dataclass
class AgentSpec:
    name: str
    model: object
    x0: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray
    weights: WeightBinding

    def cost(self, theta, layout):
        Q, R, QN, rho = self.weights.resolve(theta, layout)
        n, m = self.model.state_dim, self.model.control_dim
        Q = np.broadcast_to(Q, (n,)).astype(float)
        R = np.broadcast_to(R, (m,)).astype(float)
        QN = np.broadcast_to(QN, (n,)).astype(float)
        return QuadraticCost(Q, R, QN, self.x_ref, self.u_ref), rho


@dataclass
class AdmmOptions:
    ddp_tol: float = 1e-6
    ddp_max_iters: int = 100
    ddp_mode: str = "ilqr"
    mu_schedule: tuple = (1.0, 0.1, 0.01, 1e-3, 1e-4)
    newton_tol: float = 1e-8
    newton_max_iters: int = 60
    center_tol: float = 1e-1
    # warm-started solves (copies from the previous iteration) skip larger μ
    warm_mu_start: float = 1e-2
    margin: float = 1e-3
    threads: int = 1


@dataclass
class MultiAgentProblem:
    agents: list
    layout: object
    N: int
    stage_terms: StageTerms | None = None
    terminal_terms: StageTerms | None = None
    options: AdmmOptions = field(default_factory=AdmmOptions)

    def __post_init__(self):
        for a in self.agents:
            if a.x_ref.shape[0] != self.N + 1 or a.u_ref.shape[0] != self.N:
                raise SolverError(f"agent {a.name}: references do not match horizon {self.N}")

    # z layout: stage k<N is [x̃_1, ũ_1, x̃_2, ũ_2, ..., extras]; terminal is [x̃_1, x̃_2, ...]
    @property
    def n_extra(self):
        return self.stage_terms.n_extra if self.stage_terms is not None else 0

    def stage_slices(self):
        out, off = [], 0
        for a in self.agents:
            n, m = a.model.state_dim, a.model.control_dim
            out.append((slice(off, off + n), slice(off + n, off + n + m)))
            off += n + m
        return out, slice(off, off + self.n_extra), off + self.n_extra

    def terminal_slices(self):
        out, off = [], 0
        for a in self.agents:
            n = a.model.state_dim
            out.append(slice(off, off + n))
            off += n
        return out, off

    def stage_dim(self):
        return self.stage_slices()[2]

    def with_options(self, **kw):
        return replace(self, options=replace(self.options, **kw))


@dataclass
class AdmmIterate:
    """State after iteration a (a = 0 is the initialization)."""
    a: int
    primal: list
    x_copy: list
    u_copy: list
    extra: np.ndarray
    lam: list
    xi: list
    rho: list
    workspaces: list | None = None
    ddp_reports: list | None = None
    mu: float = 0.0
    stage_info: dict | None = None


@dataclass
class ResidualReport:
    x: np.ndarray          # (iterations, agents)
    u: np.ndarray
    aggregate: np.ndarray  # (iterations,)


@dataclass
class AdmmResult:
    init: AdmmIterate
    iterates: list
    report: ResidualReport

    @property
    def last(self):
        return self.iterates[-1] if self.iterates else self.init


# ---------------------------------------------------------------------------
# subproblem 1


def _solve_agent(args):
    i, spec, cost, init, opts, a = args
    try:
        return ddp.solve(spec.model, cost, init, opts.ddp_tol, opts.ddp_max_iters, opts.ddp_mode)
    except SolverError as e:
        raise SolverError(f"subproblem 1, agent {spec.name!r}, iteration {a}: {e}") from e


def subproblem1(problem, it, hp, a=None):
    """DDP solve of every agent's augmented problem.

    Returns (primals, workspaces, reports); agents are independent and may
    run on a thread pool.
    """
    a = it.a + 1 if a is None else a
    jobs = []
    for i, spec in enumerate(problem.agents):
        base, rho = spec.cost(hp.theta, problem.layout)
        cost = ddp.AugmentedCost(base, it.x_copy[i], it.u_copy[i], it.lam[i], it.xi[i], rho)
        jobs.append((i, spec, cost, it.primal[i], problem.options, a))
    if problem.options.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(problem.options.threads) as ex:
            res = list(ex.map(_solve_agent, jobs))
    else:
        res = [_solve_agent(j) for j in jobs]
    return [r[0] for r in res], [r[1] for r in res], [r[2] for r in res]


# ---------------------------------------------------------------------------
# subproblem 2


def _phi(terms, Z, ks, theta, T, pw, mu, order):
    """Barrier objective per row: prox + coupling cost - μ Σ ln(-g)."""
    r = Z - T
    prox = 0.5 * np.sum(pw * r * r, axis=1)
    if order == 0:
        return prox + terms.barrier_value(Z, ks, theta, mu)
    val, grad, hess = terms.barrier(Z, ks, theta, mu)
    return prox + val, grad + pw * r, hess + np.diag(pw)[None]


def barrier_hessian(terms, Z, ks, theta, mu):
    """Hessian of c(z, θ) - μ Σ ln(-g(z)) (no proximal part)."""
    d = Z.shape[1]
    _, _, H = _phi(terms, Z, ks, theta, Z, np.zeros(d), mu, 2)
    return H


def repair(terms, Z, ks, margin=1e-3, max_iters=200):
    """Push rows of Z into g ≤ -margin along the violated constraint gradients."""
    Z = Z.copy()
    if terms.n_ineq == 0:
        return Z
    rng_dir = np.linspace(1.0, 2.0, Z.shape[1])
    for _ in range(max_iters):
        g, J = terms.ineq(Z, ks, 1)
        viol = g > -margin
        if not viol.any():
            return Z
        step = np.zeros_like(Z)
        for b, c in zip(*np.nonzero(viol)):
            nrm = J[b, c] @ J[b, c]
            if nrm < 1e-20:
                # degenerate gradient (e.g. coincident points): nudge deterministically
                step[b] += 1e-3 * rng_dir / np.linalg.norm(rng_dir)
                continue
            step[b] -= (g[b, c] + 2 * margin) / nrm * J[b, c]
        Z += step
    g = terms.ineq(Z, ks, 0)
    bad = sorted({terms.names[c] for c in np.nonzero(g >= 0)[1]})
    if bad:
        raise InfeasibleError(f"no strictly feasible point found; violated: {', '.join(bad)}")
    return Z


@dataclass
class StaticSolveInfo:
    mu: float
    kkt: np.ndarray
    newton_iters: int
    converged: bool


LS_BATCH = 12


def _newton_dirs(hess, grad, I):
    """Solve H dz = -g row-wise; rows that are not PD get a Levenberg shift."""
    H = 0.5 * (hess + hess.transpose(0, 2, 1))
    try:
        return -_chol_solve(np.linalg.cholesky(H), grad)
    except np.linalg.LinAlgError:
        pass
    lam = np.linalg.eigvalsh(H)[:, 0]
    scale = np.maximum(1.0, np.abs(H).max(axis=(1, 2)))
    shift = np.where(lam > 1e-10 * scale, 0.0, 1e-8 * scale - lam)
    while True:
        try:
            L = np.linalg.cholesky(H + shift[:, None, None] * I)
            break
        except np.linalg.LinAlgError:
            shift = np.where(shift > 0, shift * 10, 0.0)
    return -_chol_solve(L, grad)


def _chol_solve(L, g):
    y = np.linalg.solve(L, g[..., None])
    return np.linalg.solve(L.transpose(0, 2, 1), y)[..., 0]


def solve_static(terms, Z0, ks, theta, T, pw, opts, warm=False):
    """Minimize ½|z - T|²_pw + c(z, θ) - μ Σ ln(-g(z)) for a μ schedule.

    Rows of Z are independent problems solved in lockstep. Z0 must be
    strictly feasible (see `repair`).
    """
    Z = Z0.copy()
    B, d = Z.shape
    I = np.eye(d)
    total_iters = 0
    mus = opts.mu_schedule if terms.n_ineq else opts.mu_schedule[-1:]
    if warm and opts.warm_mu_start is not None:
        mus = tuple(m for m in mus if m <= opts.warm_mu_start) or mus[-1:]
    kkt = np.zeros(B)
    done = np.zeros(B, bool)
    for level, mu in enumerate(mus):
        done = np.zeros(B, bool)
        # intermediate barrier levels only need approximate centering
        tol = opts.newton_tol if level == len(mus) - 1 else max(opts.newton_tol,
                                                                 opts.center_tol * mu)
        for _ in range(opts.newton_max_iters):
            act = np.flatnonzero(~done)
            if act.size == 0:
                break
            Za, ka, Ta = Z[act], ks[act], T[act]
            val, grad, hess = _phi(terms, Za, ka, theta, Ta, pw, mu, 2)
            kkt[act] = np.max(np.abs(grad), axis=1)
            conv = kkt[act] <= tol
            done[act[conv]] = True
            keep = ~conv
            if not keep.any():
                break
            act, Za, ka, Ta = act[keep], Za[keep], ka[keep], Ta[keep]
            val, grad, hess = val[keep], grad[keep], hess[keep]
            dz = _newton_dirs(hess, grad, I)
            slope = np.einsum("bd,bd->b", grad, dz)
            alpha = np.ones(act.size)
            pending = np.ones(act.size, bool)
            newZ = Za.copy()
            # first try a ladder of step lengths in one batched evaluation
            ladder = 0.5 ** np.arange(LS_BATCH)
            cand = Za[None] + ladder[:, None, None] * dz[None]
            na = act.size
            fc = _phi(terms, cand.reshape(-1, d), np.tile(ka, LS_BATCH), theta,
                      np.tile(Ta, (LS_BATCH, 1)), pw, mu, 0).reshape(LS_BATCH, na)
            ok = fc <= val[None] + 1e-4 * ladder[:, None] * slope[None]
            ok |= np.isfinite(fc) & (np.abs(fc - val[None]) <= 1e-14 * np.abs(val[None]))
            hit = ok.any(axis=0)
            first = np.argmax(ok, axis=0)
            rows = np.flatnonzero(hit)
            newZ[rows] = cand[first[rows], rows]
            pending[rows] = False
            alpha[rows] = ladder[first[rows]]
            alpha[~hit] = 0.5 ** LS_BATCH
            for _ls in range(60 - LS_BATCH):
                idx = np.flatnonzero(pending)
                if idx.size == 0:
                    break
                cand = Za[idx] + alpha[idx, None] * dz[idx]
                fc = _phi(terms, cand, ka[idx], theta, Ta[idx], pw, mu, 0)
                ok = fc <= val[idx] + 1e-4 * alpha[idx] * slope[idx]
                # accept pure round-off level changes too
                ok |= np.isfinite(fc) & (np.abs(fc - val[idx]) <= 1e-14 * np.abs(val[idx]))
                newZ[idx[ok]] = cand[ok]
                pending[idx[ok]] = False
                alpha[idx[~ok]] *= 0.5
            stuck = pending | (np.max(np.abs(alpha[:, None] * dz), axis=1)
                               <= 1e-15 * (1 + np.max(np.abs(Za), axis=1)))
            Z[act] = newZ
            done[act[stuck]] = True
            total_iters += 1
            log.debug("mu=%g active=%d stuck=%d fallback=%d", mu, act.size, int(stuck.sum()),
                      int((~hit).sum()))
    _, grad, _ = _phi(terms, Z, ks, theta, T, pw, mus[-1], 2)
    kkt = np.max(np.abs(grad), axis=1) if d else np.zeros(B)
    converged = bool(np.all(kkt <= max(opts.newton_tol, 1e-6)))
    return Z, StaticSolveInfo(mus[-1], kkt, total_iters, converged)


def _ensure_feasible(terms, Z, ks, margin):
    if terms.n_ineq == 0:
        return Z
    g = terms.ineq(Z, ks, 0)
    bad = np.any(g >= 0, axis=1)
    if bad.any():
        Z = Z.copy()
        Z[bad] = repair(terms, Z[bad], ks[bad], margin)
    return Z


def subproblem2(problem, primals, prev, hp, a=None):
    """Update all safe copies given new primals and the previous duals/copies.

    Returns (x_copy, u_copy, extra, stage_info); stage_info carries the final
    stacked stage vectors and barrier μ needed by the gradient solver.
    """
    N = problem.N
    sl, ex_sl, d = problem.stage_slices()
    tsl, dN = problem.terminal_slices()
    rhos = prev.rho
    # proximal targets x + λ/ρ, u + ξ/ρ and weights
    T = np.zeros((N, d))
    Z0 = np.zeros((N, d))
    pw = np.zeros(d)
    TN = np.zeros((1, dN))
    ZN0 = np.zeros((1, dN))
    pwN = np.zeros(dN)
    for i, (sx, su) in enumerate(sl):
        r = rhos[i]
        tx = primals[i].states + prev.lam[i] / r
        tu = primals[i].controls + prev.xi[i] / r
        T[:, sx], T[:, su] = tx[:-1], tu
        Z0[:, sx], Z0[:, su] = prev.x_copy[i][:-1], prev.u_copy[i]
        pw[sx] = r
        pw[su] = r
        TN[0, tsl[i]] = tx[-1]
        ZN0[0, tsl[i]] = prev.x_copy[i][-1]
        pwN[tsl[i]] = r
    if problem.n_extra:
        Z0[:, ex_sl] = prev.extra
    opts = problem.options
    ks = np.arange(N)
    kN = np.array([N])
    info = {}
    where = f"subproblem 2, iteration {a}" if a is not None else "subproblem 2"
    try:
        if problem.stage_terms is None:
            Z = T.copy()
            sinfo = StaticSolveInfo(0.0, np.zeros(N), 0, True)
        else:
            g0 = problem.stage_terms.ineq(Z0, ks, 0)
            warm = prev.stage_info is not None and bool(np.all(g0 < 0))
            Z0 = _ensure_feasible(problem.stage_terms, Z0, ks, opts.margin)
            Z, sinfo = solve_static(problem.stage_terms, Z0, ks, hp.theta, T, pw, opts, warm)
        if problem.terminal_terms is None:
            ZN = TN.copy()
            tinfo = StaticSolveInfo(0.0, np.zeros(1), 0, True)
        else:
            g0 = problem.terminal_terms.ineq(ZN0, kN, 0)
            warm = prev.stage_info is not None and bool(np.all(g0 < 0))
            ZN0 = _ensure_feasible(problem.terminal_terms, ZN0, kN, opts.margin)
            ZN, tinfo = solve_static(problem.terminal_terms, ZN0, kN, hp.theta, TN, pwN, opts,
                                     warm)
    except InfeasibleError as e:
        raise InfeasibleError(f"{where}: {e}") from e
    for inf_, label in ((sinfo, "stage"), (tinfo, "terminal")):
        if not inf_.converged:
            log.warning("%s (%s): Newton not converged at final mu, KKT residual %.3g",
                        where, label, float(np.max(inf_.kkt)))
    x_copy, u_copy = [], []
    for i, (sx, su) in enumerate(sl):
        xc = np.vstack([Z[:, sx], ZN[:, tsl[i]]])
        x_copy.append(xc)
        u_copy.append(Z[:, su].copy())
    extra = Z[:, ex_sl].copy()
    info = dict(Z=Z, ZN=ZN, T=T, TN=TN, pw=pw, pwN=pwN, mu_stage=sinfo.mu,
                mu_terminal=tinfo.mu, kkt=max(float(np.max(sinfo.kkt)), float(np.max(tinfo.kkt))))
    return x_copy, u_copy, extra, info


def subproblem2_stage(problem, primals, prev, hp, k):
    """Copies of all agents at a single stage k (convenience wrapper)."""
    x_copy, u_copy, extra, _ = subproblem2(problem, primals, prev, hp)
    out = [xc[k] for xc in x_copy]
    if k < problem.N:
        out += [uc[k] for uc in u_copy]
    return out


# ---------------------------------------------------------------------------
# subproblem 3


def subproblem3(primals, x_copy, u_copy, lam, xi, rhos):
    new_lam, new_xi = [], []
    for i, tr in enumerate(primals):
        new_lam.append(lam[i] + rhos[i] * (tr.states - x_copy[i]))
        new_xi.append(xi[i] + rhos[i] * (tr.controls - u_copy[i]))
    return new_lam, new_xi


# ---------------------------------------------------------------------------
# driver


def initial_iterate(problem, hp, guess=None, extra=None):
    """Copies = initial primal guess, duals = 0.

    The default guess rolls each agent out from x0 with its reference controls.
    """
    primal = []
    for i, spec in enumerate(problem.agents):
        if guess is not None:
            tr = guess[i]
        else:
            tr = spec.model.rollout(spec.x0, spec.u_ref)
        primal.append(tr)
    rhos = [spec.cost(hp.theta, problem.layout)[1] for spec in problem.agents]
    if extra is None:
        extra = np.zeros((problem.N, problem.n_extra))
    return AdmmIterate(
        a=0,
        primal=primal,
        x_copy=[tr.states.copy() for tr in primal],
        u_copy=[tr.controls.copy() for tr in primal],
        extra=np.array(extra, float),
        lam=[np.zeros_like(tr.states) for tr in primal],
        xi=[np.zeros_like(tr.controls) for tr in primal],
        rho=rhos,
    )


def residuals(it):
    rx = np.array([np.linalg.norm(tr.states - xc) for tr, xc in zip(it.primal, it.x_copy)])
    ru = np.array([np.linalg.norm(tr.controls - uc) for tr, uc in zip(it.primal, it.u_copy)])
    return rx, ru


def step(problem, prev, hp):
    """One ADMM iteration from `prev`."""
    a = prev.a + 1
    primals, wss, reps = subproblem1(problem, prev, hp, a)
    x_copy, u_copy, extra, info = subproblem2(problem, primals, prev, hp, a)
    lam, xi = subproblem3(primals, x_copy, u_copy, prev.lam, prev.xi, prev.rho)
    return AdmmIterate(a, primals, x_copy, u_copy, extra, lam, xi, list(prev.rho),
                       wss, reps, info["mu_stage"], info)


def run(problem, hp, a_max, init=None, tol=None):
    """Algorithm driver: `a_max` iterations (or until the aggregate residual < tol).

    `init` may be a previous iterate, in which case the run continues from it
    and the iteration counter carries on.
    """
    if a_max < 1:
        raise ValueError("a_max must be at least 1")
    if init is None:
        init = initial_iterate(problem, hp)
    rhos = [spec.cost(hp.theta, problem.layout)[1] for spec in problem.agents]
    if list(init.rho) != rhos:
        init = replace(init, rho=rhos)
    iterates = []
    it = init
    for _ in range(a_max):
        it = step(problem, it, hp)
        iterates.append(it)
        if tol is not None:
            rx, ru = residuals(it)
            if np.sqrt(np.sum(rx ** 2 + ru ** 2)) < tol:
                break
    res = [residuals(it) for it in iterates]
    rx = np.array([r[0] for r in res])
    ru = np.array([r[1] for r in res])
    agg = np.sqrt(np.sum(rx ** 2 + ru ** 2, axis=1))
    return AdmmResult(init, iterates, ResidualReport(rx, ru, agg))


# ---------------------------------------------------------------------------
# built-in toy problems


def consensus_toy(N=10, dt=0.1, x0s=((0.0, 0.0), (2.0, 0.0)), refs=((1.5, 0.0), (0.5, 0.0)),
                  box=None, separation=None, terminal_only=False, options=None):
    """Two 1-D double integrators pulled together at the final step.

    Each agent tracks its own set point; a quadratic penalty w/2·|x̃₁,N - x̃₂,N|²
    in the static subproblem couples their terminal states. θ holds both
    agents' [Q, R, QN, ρ] and the coupling weight w.

    `box` adds position copies ≤ box at every stage; `separation` adds
    |p̃₁ - p̃₂| ≥ separation at every stage (nonconvex). With
    `terminal_only` the constraints act on the final step alone.
    """
    from .core import ThetaLayout, double_integrator

    layout = ThetaLayout([("a1.Q", 2), ("a1.R", 1), ("a1.QN", 2), ("a1.rho", 1),
                          ("a2.Q", 2), ("a2.R", 1), ("a2.QN", 2), ("a2.rho", 1),
                          ("coupling.w", 1)])
    agents = []
    for i, (x0, r) in enumerate(zip(x0s, refs), start=1):
        model = double_integrator(dt)
        x_ref = np.tile(np.asarray(r, float), (N + 1, 1))
        u_ref = np.zeros((N, 1))
        agents.append(AgentSpec(f"a{i}", model, np.asarray(x0, float), x_ref, u_ref,
                                WeightBinding(f"a{i}.Q", f"a{i}.R", f"a{i}.QN", f"a{i}.rho")))
    # terminal z = [x̃₁ (2), x̃₂ (2)]
    wcol = int(layout.index("coupling.w")[0])
    terminal = Composite(costs=[PairPenalty([0, 1], [2, 3], theta_col=wcol)])
    stage = None
    if (box is not None or separation is not None) and not terminal_only:
        # stage z = [x̃₁, ũ₁, x̃₂, ũ₂] = [p1, v1, a1, p2, v2, a2]
        cons = []
        if box is not None:
            for j, nm in ((0, "box.a1"), (3, "box.a2")):
                a = np.zeros(6)
                a[j] = 1.0
                cons.append(LinearLeq(a, box, nm))
        if separation is not None:
            cons.append(MinSeparation([0], [3], separation, name="separation"))
        stage = Composite(constraints=cons)
    if box is not None or separation is not None:
        tcons = []
        if box is not None:
            for j, nm in ((0, "box.a1"), (2, "box.a2")):
                a = np.zeros(4)
                a[j] = 1.0
                tcons.append(LinearLeq(a, box, nm))
        if separation is not None:
            tcons.append(MinSeparation([0], [2], separation, name="separation"))
        terminal = Composite(costs=terminal.costs, constraints=tcons)
    prob = MultiAgentProblem(agents, layout, N, stage, terminal, options or AdmmOptions())
    return prob


def consensus_toy_theta(rho=1.0, w=0.3):
    """Default θ for the consensus toy (Q = QN = [5, 1], R = 1)."""
    from .core import direct_theta

    agent = [5.0, 1.0, 1.0, 5.0, 1.0, rho]
    toy_layout = consensus_toy().layout
    return direct_theta(agent + agent + [w], toy_layout)
