"""Distributed gradient solver for the ADMM-DDP pipeline.

Differentiating every ADMM subproblem at its solution gives three
auxiliary systems that mirror the forward pass: a matrix-valued LQR per
agent, a matrix-valued static QP per stage and a dual-gradient update.
Their solutions are the Jacobians of the trajectories with respect to θ.

The LQR solves reuse the DDP gains and value Hessians; two independent
LQR solvers (costate recursion, augmented-state recursion) and a dense
centralized KKT solve serve as oracles.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import admm as _admm
from .core import ConfigError, SolverError
from .ddp import DdpWorkspace, riccati_sweep

EPS_REG = 1e-6


@dataclass
class AuxLqrData:
    """Matrix-valued LQR: Hessian blocks, θ-forcing terms and linear dynamics."""
    Hxx: np.ndarray          # (N+1, n, n), index N is terminal
    Hxu: np.ndarray          # (N, n, m)
    Huu: np.ndarray          # (N, m, m)
    Hxt: np.ndarray          # (N+1, n, p)
    Hut: np.ndarray          # (N, m, p)
    fx: np.ndarray           # (N, n, n)
    fu: np.ndarray           # (N, n, m)
    ft: np.ndarray | None = None   # (N, n, p)

    def __post_init__(self):
        N, n, m = self.fu.shape
        p = self.Hxt.shape[2]
        shapes = dict(Hxx=(N + 1, n, n), Hxu=(N, n, m), Huu=(N, m, m), Hxt=(N + 1, n, p),
                      Hut=(N, m, p), fx=(N, n, n))
        for k, s in shapes.items():
            if getattr(self, k).shape != s:
                raise ConfigError(f"{k} has shape {getattr(self, k).shape}, expected {s}")
        if self.ft is not None and self.ft.shape != (N, n, p):
            raise ConfigError(f"ft has shape {self.ft.shape}, expected {(N, n, p)}")

    @property
    def dims(self):
        N, n, m = self.fu.shape
        return N, n, m, self.Hxt.shape[2]


def lqr_workspace(aux):
    """Riccati quantities for `aux` (what a converged DDP would have cached)."""
    N, n, m, _ = aux.dims
    out = riccati_sweep(aux.fx, aux.fu, aux.Hxx[:N], aux.Hxu, aux.Huu, aux.Hxx[N])
    return DdpWorkspace(fx=aux.fx, fu=aux.fu, lxx=aux.Hxx[:N], lxu=aux.Hxu, luu=aux.Huu,
                        lxxN=aux.Hxx[N], **out)


def aux_lqr_reuse(aux, ws):
    """Solve the matrix LQR reusing K, Q_uu⁻¹, Q_xu and V_xx from DDP.

    Only the V_xθ recursion is new; returns X (N+1, n, p) and U (N, m, p).
    """
    N, n, m, p = aux.dims
    if ws.K.shape != (N, m, n):
        raise ConfigError(f"workspace gains have shape {ws.K.shape}, expected {(N, m, n)}")
    fx, fu, ft = aux.fx, aux.fu, aux.ft
    K, Qinv, Qxu, Vxx = ws.K, ws.Quu_inv, ws.Qxu, ws.Vxx
    kff = np.empty((N, m, p))
    S = aux.Hxt[N]
    for k in range(N - 1, -1, -1):
        if ft is not None:
            S = S + Vxx[k + 1] @ ft[k]
        kf = -Qinv[k] @ (aux.Hut[k] + fu[k].T @ S)
        kff[k] = kf
        S = aux.Hxt[k] + fx[k].T @ S + Qxu[k] @ kf
    X = np.empty((N + 1, n, p))
    U = np.empty((N, m, p))
    X[0] = 0.0
    for k in range(N):
        U[k] = K[k] @ X[k] + kff[k]
        X[k + 1] = fx[k] @ X[k] + fu[k] @ U[k]
        if ft is not None:
            X[k + 1] += ft[k]
    return X, U


def aux_lqr_pmp_oracle(aux):
    """Costate (PMP) recursion for the same matrix LQR."""
    N, n, m, p = aux.dims
    In = np.eye(n)
    P = aux.Hxx[N]
    W = aux.Hxt[N]
    Ps, Ws = [None] * (N + 1), [None] * (N + 1)
    Ps[N], Ws[N] = P, W
    pre = []
    for k in range(N):
        try:
            Hinv = np.linalg.inv(aux.Huu[k])
        except np.linalg.LinAlgError:
            raise SolverError(f"PMP oracle: singular H_uu at step {k}") from None
        F, G = aux.fx[k], aux.fu[k]
        HuxT = aux.Hxu[k].T
        E = aux.ft[k] if aux.ft is not None else 0.0
        A = F - G @ Hinv @ HuxT
        R = G @ Hinv @ G.T
        M = E - G @ Hinv @ aux.Hut[k]
        Q = aux.Hxx[k] - aux.Hxu[k] @ Hinv @ HuxT
        Nt = aux.Hxt[k] - aux.Hxu[k] @ Hinv @ aux.Hut[k]
        pre.append((Hinv, A, R, M, Q, Nt))
    for k in range(N - 1, -1, -1):
        Hinv, A, R, M, Q, Nt = pre[k]
        try:
            PinvIRP = Ps[k + 1] @ np.linalg.inv(In + R @ Ps[k + 1])
        except np.linalg.LinAlgError:
            raise SolverError(f"PMP oracle: singular I + RP at step {k}") from None
        Ps[k] = Q + A.T @ PinvIRP @ A
        Ws[k] = A.T @ PinvIRP @ (M - R @ Ws[k + 1]) + A.T @ Ws[k + 1] + Nt
        pre[k] = pre[k] + (PinvIRP,)
    X = np.empty((N + 1, n, p))
    U = np.empty((N, m, p))
    X[0] = 0.0
    for k in range(N):
        Hinv, A, R, M, Q, Nt, PinvIRP = pre[k]
        G = aux.fu[k]
        Wn = Ws[k + 1]
        U[k] = -Hinv @ ((aux.Hxu[k].T + G.T @ PinvIRP @ A) @ X[k]
                        + G.T @ PinvIRP @ (M - R @ Wn) + G.T @ Wn + aux.Hut[k])
        X[k + 1] = aux.fx[k] @ X[k] + G @ U[k]
        if aux.ft is not None:
            X[k + 1] += aux.ft[k]
    return X, U


def aux_lqr_augmented_oracle(aux, instrument=None):
    """One DDP sweep on the augmented state [x; θ] (θ' = θ).

    Carries the full p×p V_θθ recursion; if `instrument` is a list the
    V_θθ matrices are appended to it (backward order).
    """
    N, n, m, p = aux.dims
    Vxx = aux.Hxx[N]
    Vxt = aux.Hxt[N]
    Vtt = np.zeros((p, p))
    Kx = np.empty((N, m, n))
    Kt = np.empty((N, m, p))
    for k in range(N - 1, -1, -1):
        F, G = aux.fx[k], aux.fu[k]
        E = aux.ft[k] if aux.ft is not None else np.zeros((n, p))
        VF, VG, VE = Vxx @ F, Vxx @ G, Vxx @ E
        Quu = aux.Huu[k] + G.T @ VG
        Qux = aux.Hxu[k].T + G.T @ VF
        Qut = aux.Hut[k] + G.T @ (VE + Vxt)
        Qxx = aux.Hxx[k] + F.T @ VF
        Qxt = aux.Hxt[k] + F.T @ (VE + Vxt)
        Qtt = Vtt + E.T @ VE + E.T @ Vxt + Vxt.T @ E
        try:
            Qinv = np.linalg.inv(Quu)
        except np.linalg.LinAlgError:
            raise SolverError(f"augmented oracle: singular Q_uu at step {k}") from None
        Kx[k] = -Qinv @ Qux
        Kt[k] = -Qinv @ Qut
        Vxx = Qxx + Qux.T @ Kx[k]
        Vxx = 0.5 * (Vxx + Vxx.T)
        Vxt = Qxt + Qux.T @ Kt[k]
        Vtt = Qtt + Qut.T @ Kt[k]
        if instrument is not None:
            instrument.append(Vtt)
    X = np.empty((N + 1, n, p))
    U = np.empty((N, m, p))
    X[0] = 0.0
    for k in range(N):
        U[k] = Kx[k] @ X[k] + Kt[k]
        X[k + 1] = aux.fx[k] @ X[k] + aux.fu[k] @ U[k]
        if aux.ft is not None:
            X[k + 1] += aux.ft[k]
    return X, U


# ---------------------------------------------------------------------------
# static QP and dual-gradient pieces


def regularize(L, eps=EPS_REG):
    """Shift symmetric matrices (batched) so that λ_min ≥ eps."""
    L = 0.5 * (L + np.swapaxes(L, -1, -2))
    if L.shape[-1] == 0:
        return L, np.zeros(L.shape[:-2])
    lam = np.linalg.eigvalsh(L)[..., 0]
    shift = np.where(lam < eps, eps - lam, 0.0)
    return L + shift[..., None, None] * np.eye(L.shape[-1]), shift


def aux_static_qp(L, pw, Lzt, eps_reg=EPS_REG):
    """Solve [X̃; Ũ] = -(diag(pw) + L_reg)⁻¹ L_zθ for a batch of stages.

    L is the Hessian of the coupling cost plus barrier (no proximal part).
    """
    Lr, _ = regularize(L, eps_reg)
    Lhat = Lr + pw[..., None] * np.eye(L.shape[-1])
    try:
        return -np.linalg.solve(Lhat, Lzt)
    except np.linalg.LinAlgError:
        raise SolverError("static QP: regularized Hessian is singular") from None


def dual_grad_update(dlam, X, Xc, rho, resid=None, rho_col=None):
    """dλ' = dλ + ρ(X - X̃) + (x - x̃) in the ρ column (when ρ ∈ θ)."""
    out = dlam + rho * (X - Xc)
    if rho_col is not None and resid is not None:
        out = out.copy()
        out[..., rho_col] += resid
    return out


# ---------------------------------------------------------------------------
# pipeline gradient


@dataclass
class GradIterate:
    a: int
    X: list
    U: list
    Xc: list
    Uc: list
    dlam: list
    dxi: list
    extra: np.ndarray | None = None   # (N, n_extra, p)


def _agent_theta_terms(spec, cost, traj, xc, uc, layout, p):
    """∇_θ of the augmented stage gradients ℓ̂_x, ℓ̂_u at `traj` (explicit part)."""
    N = traj.N
    n, m = traj.states.shape[1], traj.controls.shape[1]
    qc, rc, qnc, rhoc = spec.weights.columns(layout)
    Hxt = np.zeros((N + 1, n, p))
    Hut = np.zeros((N, m, p))
    dx = traj.states - cost.x_ref
    du = traj.controls - cost.u_ref
    ar_n = np.arange(n)
    ar_m = np.arange(m)
    if qc is not None:
        cols = np.broadcast_to(qc, (n,))
        Hxt[:N, ar_n, cols] += dx[:N]
    if qnc is not None:
        cols = np.broadcast_to(qnc, (n,))
        Hxt[N, ar_n, cols] += dx[N]
    if rc is not None:
        cols = np.broadcast_to(rc, (m,))
        Hut[:, ar_m, cols] += du
    rho_col = None
    if rhoc is not None and xc is not None:
        rho_col = int(rhoc[0])
        Hxt[:, :, rho_col] += traj.states - xc
        Hut[:, :, rho_col] += traj.controls - uc
    return Hxt, Hut, rho_col


def agent_aux(ws, Hxt, Hut):
    """AuxLqrData from a DDP workspace: Hamiltonian Hessians recovered from the Q-blocks."""
    fx, fu = ws.fx, ws.fu
    V = ws.Vxx[1:]
    Hxx = np.empty((ws.N + 1,) + ws.Qxx.shape[1:])
    Hxx[:-1] = ws.Qxx - np.einsum("kji,kjl,klm->kim", fx, V, fx)
    Hxx[-1] = ws.Vxx[-1]
    Hxu = ws.Qxu - np.einsum("kji,kjl,klm->kim", fx, V, fu)
    Huu = ws.Quu - np.einsum("kji,kjl,klm->kim", fu, V, fu)
    return AuxLqrData(Hxx, Hxu, Huu, Hxt, Hut, fx, fu, None)


SOLVERS = {
    "reuse": lambda aux, ws: aux_lqr_reuse(aux, ws),
    "pmp": lambda aux, ws: aux_lqr_pmp_oracle(aux),
    "augmented": lambda aux, ws: aux_lqr_augmented_oracle(aux),
}


def subsystem1(problem, it, prev_grad, hp, solver="reuse", threads=1):
    """Matrix LQR per agent with the copy/dual-gradient couplings of iteration a-1."""
    p = problem.layout.size
    solve = SOLVERS[solver]
    prev_it = it["prev"]
    cur = it["cur"]

    def one(i):
        spec = problem.agents[i]
        base, rho = spec.cost(hp.theta, problem.layout)
        traj = cur.primal[i]
        Hxt, Hut, _ = _agent_theta_terms(spec, base, traj, prev_it.x_copy[i], prev_it.u_copy[i],
                                         problem.layout, p)
        Hxt = Hxt - rho * prev_grad.Xc[i] + prev_grad.dlam[i]
        Hut = Hut - rho * prev_grad.Uc[i] + prev_grad.dxi[i]
        aux = agent_aux(cur.workspaces[i], Hxt, Hut)
        try:
            return solve(aux, cur.workspaces[i])
        except SolverError as e:
            raise SolverError(f"gradient subsystem 1, agent {spec.name!r}, "
                              f"iteration {cur.a}: {e}") from e

    idx = range(len(problem.agents))
    if threads > 1 and len(problem.agents) > 1:
        with ThreadPoolExecutor(threads) as ex:
            res = list(ex.map(one, idx))
    else:
        res = [one(i) for i in idx]
    return [r[0] for r in res], [r[1] for r in res]


def stage_hessians(problem, cur, hp):
    """Barrier/coupling Hessians and θ-mixed terms at the stored copies of `cur`."""
    info = cur.stage_info
    N = problem.N
    p = problem.layout.size
    _, _, d = problem.stage_slices()
    _, dN = problem.terminal_slices()
    ks = np.arange(N)
    kN = np.array([N])
    out = {}
    for key, terms, Z, kk, dim, mu in (("stage", problem.stage_terms, info["Z"], ks, d, info["mu_stage"]),
                                       ("terminal", problem.terminal_terms, info["ZN"], kN, dN,
                                        info["mu_terminal"])):
        if terms is None:
            out[key] = (np.zeros((Z.shape[0], dim, dim)), np.zeros((Z.shape[0], dim, p)))
            continue
        L = _admm.barrier_hessian(terms, Z, kk, hp.theta, mu)
        C = terms.cost_theta(Z, kk, hp.theta)
        if C is None:
            C = np.zeros((Z.shape[0], dim, p))
        out[key] = (L, C)
    return out


def subsystem2(problem, cur, prev_grad, X, U, hp, eps_reg=EPS_REG, hess=None):
    """Copy gradients from the per-stage matrix QPs."""
    N = problem.N
    p = problem.layout.size
    sl, ex_sl, d = problem.stage_slices()
    tsl, dN = problem.terminal_slices()
    hess = stage_hessians(problem, cur, hp) if hess is None else hess
    L, C = hess["stage"]
    LN, CN = hess["terminal"]
    Lzt = C.copy()
    LztN = CN.copy()
    pw = cur.stage_info["pw"]
    pwN = cur.stage_info["pwN"]
    for i, spec in enumerate(problem.agents):
        sx, su = sl[i]
        rho = cur.rho[i]
        rhoc = spec.weights.columns(problem.layout)[3]
        Lzt[:, sx] += -rho * X[i][:N] - prev_grad.dlam[i][:N]
        Lzt[:, su] += -rho * U[i] - prev_grad.dxi[i]
        LztN[0, tsl[i]] += -rho * X[i][N] - prev_grad.dlam[i][N]
        if rhoc is not None:
            c = int(rhoc[0])
            rx = cur.primal[i].states - cur.x_copy[i]
            ru = cur.primal[i].controls - cur.u_copy[i]
            Lzt[:, sx, c] -= rx[:N]
            Lzt[:, su, c] -= ru
            LztN[0, tsl[i], c] -= rx[N]
    try:
        Z = aux_static_qp(L, pw, Lzt, eps_reg)
        ZN = aux_static_qp(LN, pwN, LztN, eps_reg)
    except SolverError as e:
        raise SolverError(f"gradient subsystem 2, iteration {cur.a}: {e}") from e
    Xc, Uc = [], []
    for i in range(len(problem.agents)):
        sx, su = sl[i]
        Xc.append(np.concatenate([Z[:, sx], ZN[:, tsl[i]]], axis=0))
        Uc.append(Z[:, su].copy())
    return Xc, Uc, Z[:, ex_sl]


def subsystem3(problem, cur, prev_grad, X, U, Xc, Uc):
    dlam, dxi = [], []
    for i, spec in enumerate(problem.agents):
        rho = cur.rho[i]
        rhoc = spec.weights.columns(problem.layout)[3]
        col = int(rhoc[0]) if rhoc is not None else None
        rx = cur.primal[i].states - cur.x_copy[i]
        ru = cur.primal[i].controls - cur.u_copy[i]
        dlam.append(dual_grad_update(prev_grad.dlam[i], X[i], Xc[i], rho, rx, col))
        dxi.append(dual_grad_update(prev_grad.dxi[i], U[i], Uc[i], rho, ru, col))
    return dlam, dxi


def zero_grad(problem):
    p = problem.layout.size
    N = problem.N
    Z = []
    for spec in problem.agents:
        n, m = spec.model.state_dim, spec.model.control_dim
        Z.append((np.zeros((N + 1, n, p)), np.zeros((N, m, p))))
    return GradIterate(0, [z[0] for z in Z], [z[1] for z in Z], [z[0] for z in Z],
                       [z[1] for z in Z], [z[0] for z in Z], [z[1] for z in Z],
                       np.zeros((N, problem.n_extra, p)))


def run(problem, fwd, hp, a_max=None, solver="reuse", eps_reg=EPS_REG, threads=1):
    """Algorithm driver for the gradient pass.

    Iterates the three auxiliary subsystems once per stored forward iterate
    (with the same ρ). Returns (final GradIterate, history list).
    """
    its = fwd.iterates
    a_max = len(its) if a_max is None else a_max
    if a_max > len(its):
        raise ConfigError(f"gradient pass asked for {a_max} iterations, forward stored {len(its)}")
    g = zero_grad(problem)
    hist = []
    prev = fwd.init
    for a in range(a_max):
        cur = its[a]
        X, U = subsystem1(problem, {"prev": prev, "cur": cur}, g, hp, solver, threads)
        Xc, Uc, ex = subsystem2(problem, cur, g, X, U, hp, eps_reg)
        dlam, dxi = subsystem3(problem, cur, g, X, U, Xc, Uc)
        g = GradIterate(cur.a, X, U, Xc, Uc, dlam, dxi, ex)
        hist.append(g)
        prev = cur
    return g, hist


# ---------------------------------------------------------------------------
# centralized dense oracle


@dataclass
class CentralizedResult:
    X: list
    U: list
    extra: np.ndarray
    hessian_min_eig: float
    kkt_dim: int = 0


def centralized_qp_oracle(problem, fwd, hp, eps_reg=EPS_REG, min_eig=True):
    """Dense KKT solve of the centralized matrix QP at the last forward iterate.

    Consensus is imposed exactly (copies eliminated), dynamics are hard
    equality constraints, and the stage Hessians are the regularized
    coupling/barrier Hessians. Valid as a reference once ADMM has converged.
    """
    cur = fwd.last
    N = problem.N
    p = problem.layout.size
    sl, ex_sl, d = problem.stage_slices()
    tsl, dN = problem.terminal_slices()
    # global index map
    off = 0
    xi_, ui_ = [], []
    for spec in problem.agents:
        n, m = spec.model.state_dim, spec.model.control_dim
        xi_.append(off + np.arange((N + 1) * n).reshape(N + 1, n))
        off += (N + 1) * n
        ui_.append(off + np.arange(N * m).reshape(N, m))
        off += N * m
    ne = problem.n_extra
    ei = off + np.arange(N * ne).reshape(N, ne)
    off += N * ne
    nv = off
    H = np.zeros((nv, nv))
    b = np.zeros((nv, p))
    rows = []
    for i, spec in enumerate(problem.agents):
        ws = cur.workspaces[i]
        base, rho = spec.cost(hp.theta, problem.layout)
        aux = agent_aux(ws, np.zeros((N + 1, ws.fx.shape[1], p)), np.zeros((N,) + ws.K.shape[1:2] + (p,)))
        n, m = spec.model.state_dim, spec.model.control_dim
        In, Im = np.eye(n), np.eye(m)
        Hxt, Hut, _ = _agent_theta_terms(spec, base, cur.primal[i], None, None, problem.layout, p)
        for k in range(N):
            xk, uk = xi_[i][k], ui_[i][k]
            H[np.ix_(xk, xk)] += aux.Hxx[k] - rho * In
            H[np.ix_(xk, uk)] += aux.Hxu[k]
            H[np.ix_(uk, xk)] += aux.Hxu[k].T
            H[np.ix_(uk, uk)] += aux.Huu[k] - rho * Im
            b[xk] += Hxt[k]
            b[uk] += Hut[k]
        xN = xi_[i][N]
        H[np.ix_(xN, xN)] += aux.Hxx[N] - rho * In
        b[xN] += Hxt[N]
        # dynamics rows
        rows.append((xi_[i][0], None, None, None))
        for k in range(N):
            rows.append((xi_[i][k + 1], xi_[i][k], ws.fx[k], (ui_[i][k], ws.fu[k])))
    hess = stage_hessians(problem, cur, hp)
    L, C = hess["stage"]
    LN, CN = hess["terminal"]
    Lr, _ = regularize(L, eps_reg)
    LNr, _ = regularize(LN, eps_reg)
    for k in range(N):
        gidx = np.empty(d, int)
        for i, (sx, su) in enumerate(sl):
            gidx[sx] = xi_[i][k]
            gidx[su] = ui_[i][k]
        gidx[ex_sl] = ei[k]
        H[np.ix_(gidx, gidx)] += Lr[k]
        b[gidx] += C[k]
    gidx = np.empty(dN, int)
    for i, s in enumerate(tsl):
        gidx[s] = xi_[i][N]
    H[np.ix_(gidx, gidx)] += LNr[0]
    b[gidx] += CN[0]
    H = 0.5 * (H + H.T)
    nc = sum(len(r[0]) for r in rows)
    A = np.zeros((nc, nv))
    c = np.zeros((nc, p))
    r0 = 0
    for i_next, i_cur, F, gu in rows:
        nr = len(i_next)
        A[r0:r0 + nr, i_next] = np.eye(nr)
        if i_cur is not None:
            A[np.ix_(np.arange(r0, r0 + nr), i_cur)] -= F
            A[np.ix_(np.arange(r0, r0 + nr), gu[0])] -= gu[1]
        r0 += nr
    KKT = np.block([[H, A.T], [A, np.zeros((nc, nc))]])
    rhs = np.vstack([-b, c])
    lam_min = float(np.linalg.eigvalsh(H)[0]) if min_eig else np.nan
    try:
        sol = np.linalg.solve(KKT, rhs)
    except np.linalg.LinAlgError:
        raise SolverError(f"centralized oracle: singular KKT (Hessian λ_min = {lam_min:.3g})") from None
    v = sol[:nv]
    X = [v[xi_[i]] for i in range(len(problem.agents))]
    U = [v[ui_[i]] for i in range(len(problem.agents))]
    return CentralizedResult(X, U, v[ei], lam_min, KKT.shape[0])


# ---------------------------------------------------------------------------
# metrics and truncation analysis


def paper_metric(XA, XB):
    """(1/N) Σ_k |X^A_k - X^B_k|_F / |X^A_k|_F over steps with nonzero X^A_k."""
    XA = np.asarray(XA)
    XB = np.asarray(XB)
    num = np.linalg.norm((XA - XB).reshape(XA.shape[0], -1), axis=1)
    den = np.linalg.norm(XA.reshape(XA.shape[0], -1), axis=1)
    mask = den > 0
    if not mask.any():
        return 0.0 if not np.any(num) else np.inf
    return float(np.sum(num[mask] / den[mask]) / XA.shape[0])


def rel_err(A, B):
    """|A - B|_F / max(|B|_F, tiny)."""
    A, B = np.asarray(A), np.asarray(B)
    nb = np.linalg.norm(B)
    return float(np.linalg.norm(A - B) / nb) if nb > 0 else float(np.linalg.norm(A - B))


@dataclass
class TruncationTable:
    levels: list
    grad_dev: np.ndarray      # (levels, N+1): |ΔX_k|
    primal_dev: np.ndarray    # (levels, N+1): |δτ_k|
    ratio: np.ndarray         # (levels, N+1)
    summary: dict = field(default_factory=dict)


def truncation_error_check(problem, hp, levels=(1, 2, 5, 10), a_fp=40, eps_reg=EPS_REG, fwd=None):
    """Gradient deviation of truncated runs against a long run.

    ratio_k = |ΔX_k| / Σ_{t<k} |δτ_t|, with 0 where the denominator vanishes.
    """
    if fwd is None:
        fwd = _admm.run(problem, hp, a_fp)
    _, hist = run(problem, fwd, hp, a_fp, eps_reg=eps_reg)
    N = problem.N
    ref_it = fwd.iterates[a_fp - 1]
    ref_g = hist[a_fp - 1]
    G = np.zeros((len(levels), N + 1))
    P = np.zeros((len(levels), N + 1))
    for j, a in enumerate(levels):
        it, g = fwd.iterates[a - 1], hist[a - 1]
        for i in range(len(problem.agents)):
            G[j] += np.linalg.norm((g.X[i] - ref_g.X[i]).reshape(N + 1, -1), axis=1) ** 2
            dx = it.primal[i].states - ref_it.primal[i].states
            du = it.primal[i].controls - ref_it.primal[i].controls
            P[j] += np.sum(dx ** 2, axis=1)
            P[j, :N] += np.sum(du ** 2, axis=1)
    G, P = np.sqrt(G), np.sqrt(P)
    csum = np.concatenate([np.zeros((len(levels), 1)), np.cumsum(P, axis=1)[:, :-1]], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(csum > 0, G / csum, 0.0)
    nz = ratio[ratio > 0]
    summary = dict(max_ratio=float(nz.max()) if nz.size else 0.0,
                   median_ratio=float(np.median(nz)) if nz.size else 0.0,
                   grad_dev_total=G.sum(axis=1).tolist(),
                   primal_dev_total=P.sum(axis=1).tolist())
    return TruncationTable(list(levels), G, P, ratio, summary)


# ---------------------------------------------------------------------------
# full-pipeline finite differences


def finite_difference_oracle(problem, hp, a_max, h=1e-5, cols=None):
    """Central differences of the final primal and copy trajectories.

    Each column j reruns the forward pipeline at θ ± h·max(1, |θ_j|).
    Returns a GradIterate-like dict with X, U, Xc, Uc lists of
    (N+1, n, |cols|) / (N, m, |cols|) arrays.
    """
    from dataclasses import replace

    cols = np.arange(hp.p) if cols is None else np.asarray(cols, int)
    na = len(problem.agents)
    out = {k: [[] for _ in range(na)] for k in ("X", "U", "Xc", "Uc")}
    for j in cols:
        step = h * max(1.0, abs(hp.theta[j]))
        ends = []
        for s in (1.0, -1.0):
            th = hp.theta.copy()
            th[j] += s * step
            ends.append(_admm.run(problem, replace(hp, theta=th), a_max).last)
        hi, lo = ends
        for i in range(na):
            out["X"][i].append((hi.primal[i].states - lo.primal[i].states) / (2 * step))
            out["U"][i].append((hi.primal[i].controls - lo.primal[i].controls) / (2 * step))
            out["Xc"][i].append((hi.x_copy[i] - lo.x_copy[i]) / (2 * step))
            out["Uc"][i].append((hi.u_copy[i] - lo.u_copy[i]) / (2 * step))
    return {k: [np.stack(v, axis=-1) for v in lists] for k, lists in out.items()}
