"""iLQR / DDP for one agent with the ADMM-augmented tracking cost.

The backward pass keeps every quantity the gradient solver later reuses
(gains, Q-blocks, the cached inverse of Q_uu and the value Hessians).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import QuadraticCost, SolverError, Trajectory

log = logging.getLogger(__name__)

REG_START = 1e-6
REG_UP = 10.0
REG_DOWN = 2.0
REG_MAX = 1e6
ALPHAS = tuple(2.0 ** -j for j in range(11))


class QuuNotPD(SolverError):
    def __init__(self, k):
        super().__init__(f"Q_uu not positive definite at step {k}")
        self.k = k


@dataclass
class AugmentedCost:
    """Tracking cost plus ρ/2·|x - x̃ + λ/ρ|² and ρ/2·|u - ũ + ξ/ρ|².

    The terminal stage only carries the state term. With ρ = 0 (or no
    copies) this is the base cost.
    """
    base: QuadraticCost
    x_copy: np.ndarray | None = None
    u_copy: np.ndarray | None = None
    lam: np.ndarray | None = None
    xi: np.ndarray | None = None
    rho: float = 0.0

    def __post_init__(self):
        N, n, m = self.base.N, self.base.Q.size, self.base.R.size
        if self.x_copy is None:
            self.rho = 0.0
        else:
            self.x_copy = np.asarray(self.x_copy, float)
            self.u_copy = np.asarray(self.u_copy, float)
            self.lam = np.zeros((N + 1, n)) if self.lam is None else np.asarray(self.lam, float)
            self.xi = np.zeros((N, m)) if self.xi is None else np.asarray(self.xi, float)

    @property
    def augmented(self):
        return self.x_copy is not None and self.rho > 0

    def total(self, traj):
        J = self.base.total(traj)
        if self.augmented:
            r = self.rho
            ex = traj.states - self.x_copy + self.lam / r
            eu = traj.controls - self.u_copy + self.xi / r
            J += 0.5 * r * (np.sum(ex * ex) + np.sum(eu * eu))
        return J

    def derivatives(self, traj):
        """Gradients and diagonal Hessians of every stage.

        Returns lx (N,n), lu (N,m), lxx (n,), luu (m,), lxN (n,), lxxN (n,).
        """
        c = self.base
        dx = traj.states - c.x_ref
        du = traj.controls - c.u_ref
        lx = c.Q * dx[:-1]
        lu = c.R * du
        lxN = c.QN * dx[-1]
        lxx, luu, lxxN = c.Q.copy(), c.R.copy(), c.QN.copy()
        if self.augmented:
            r = self.rho
            gx = r * (traj.states - self.x_copy) + self.lam
            lx = lx + gx[:-1]
            lxN = lxN + gx[-1]
            lu = lu + r * (traj.controls - self.u_copy) + self.xi
            lxx += r
            luu += r
            lxxN += r
        return lx, lu, lxx, luu, lxN, lxxN


@dataclass
class DdpWorkspace:
    """Backward-pass quantities per step (k = 0..N-1; value terms to N)."""
    Qx: np.ndarray
    Qu: np.ndarray
    Qxx: np.ndarray
    Qxu: np.ndarray
    Quu: np.ndarray
    Quu_inv: np.ndarray
    K: np.ndarray
    k: np.ndarray
    Vx: np.ndarray
    Vxx: np.ndarray
    fx: np.ndarray
    fu: np.ndarray
    # cost Hessians (augmented), kept for the auxiliary LQR
    lxx: np.ndarray
    lxu: np.ndarray
    luu: np.ndarray
    lxxN: np.ndarray
    reg: float = 0.0

    @property
    def N(self):
        return self.K.shape[0]

    @property
    def max_ff(self):
        return float(np.max(np.linalg.norm(self.k, axis=1)))


def riccati_sweep(fx, fu, lxx, lxu, luu, lxxN, lx=None, lu=None, lxN=None,
                  reg=0.0, second=None):
    """Backward Riccati recursion over generic Hessian blocks.

    `second` is an optional (fxx, fxu, fuu) triple of per-step tensors for
    full DDP; they are contracted with V_x of the following step.
    Raises QuuNotPD(k) when Q_uu + reg·I is not positive definite.
    """
    N, n, m = fu.shape
    lx = np.zeros((N, n)) if lx is None else lx
    lu = np.zeros((N, m)) if lu is None else lu
    lxN = np.zeros(n) if lxN is None else lxN
    Qx = np.empty((N, n))
    Qu = np.empty((N, m))
    Qxx = np.empty((N, n, n))
    Qxu = np.empty((N, n, m))
    Quu = np.empty((N, m, m))
    Quu_inv = np.empty((N, m, m))
    K = np.empty((N, m, n))
    kff = np.empty((N, m))
    Vx = np.empty((N + 1, n))
    Vxx = np.empty((N + 1, n, n))
    Vx[N] = lxN
    Vxx[N] = lxxN
    Im = np.eye(m)
    for t in range(N - 1, -1, -1):
        A, B = fx[t], fu[t]
        vx, V = Vx[t + 1], Vxx[t + 1]
        VA = V @ A
        VB = V @ B
        qx = lx[t] + A.T @ vx
        qu = lu[t] + B.T @ vx
        qxx = lxx[t] + A.T @ VA
        qxu = lxu[t] + A.T @ VB
        quu = luu[t] + B.T @ VB
        if second is not None:
            fxx, fxu, fuu = second
            qxx = qxx + np.einsum("i,ijk->jk", vx, fxx[t])
            qxu = qxu + np.einsum("i,ijk->jk", vx, fxu[t])
            quu = quu + np.einsum("i,ijk->jk", vx, fuu[t])
        quu = 0.5 * (quu + quu.T) + reg * Im
        try:
            L = np.linalg.cholesky(quu)
        except np.linalg.LinAlgError:
            raise QuuNotPD(t) from None
        Linv = np.linalg.solve(L, Im)
        qinv = Linv.T @ Linv
        Kt = -qinv @ qxu.T
        kt = -qinv @ qu
        Qx[t], Qu[t], Qxx[t], Qxu[t], Quu[t], Quu_inv[t] = qx, qu, qxx, qxu, quu, qinv
        K[t], kff[t] = Kt, kt
        Vx[t] = qx + Kt.T @ (quu @ kt) + Kt.T @ qu + qxu @ kt
        v = qxx + Kt.T @ quu @ Kt + Kt.T @ qxu.T + qxu @ Kt
        Vxx[t] = 0.5 * (v + v.T)
    return dict(Qx=Qx, Qu=Qu, Qxx=Qxx, Qxu=Qxu, Quu=Quu, Quu_inv=Quu_inv,
                K=K, k=kff, Vx=Vx, Vxx=Vxx)


def linearize(model, traj, theta=None):
    N = traj.N
    n, m = model.state_dim, model.control_dim
    fx = np.empty((N, n, n))
    fu = np.empty((N, n, m))
    for t in range(N):
        fx[t], fu[t] = model.jacobians(traj.states[t], traj.controls[t], theta)
    return fx, fu


def backward_pass(model, aug_cost, nominal, reg=0.0, mode="ilqr", theta=None, lin=None):
    """Fill a DdpWorkspace at `nominal` (raises QuuNotPD on failure)."""
    N, n, m = nominal.N, model.state_dim, model.control_dim
    fx, fu = linearize(model, nominal, theta) if lin is None else lin
    lx, lu, lxx_d, luu_d, lxN, lxxN_d = aug_cost.derivatives(nominal)
    lxx = np.broadcast_to(np.diag(lxx_d), (N, n, n))
    luu = np.broadcast_to(np.diag(luu_d), (N, m, m))
    lxu = np.zeros((N, n, m))
    second = None
    if mode == "ddp":
        sec = [model.second_derivatives(nominal.states[t], nominal.controls[t], theta)
               for t in range(N)]
        second = tuple(np.stack([s[i] for s in sec]) for i in range(3))
    elif mode != "ilqr":
        raise ValueError(f"unknown mode {mode!r}")
    out = riccati_sweep(fx, fu, lxx, lxu, luu, np.diag(lxxN_d), lx, lu, lxN, reg, second)
    return DdpWorkspace(fx=fx, fu=fu, lxx=np.array(lxx), lxu=lxu, luu=np.array(luu),
                        lxxN=np.diag(lxxN_d), reg=reg, **out)


def forward_pass(model, nominal, ws, aug_cost, alphas=ALPHAS, theta=None, J0=None):
    """Line search along u = ū + α·k + K(x - x̄).

    Returns (trajectory, cost, alpha); alpha is None when no step decreased
    the cost, in which case the nominal is returned unchanged.
    """
    J0 = aug_cost.total(nominal) if J0 is None else J0
    if not np.any(ws.k):
        return nominal, J0, None
    N = nominal.N
    xs_bar, us_bar = nominal.states, nominal.controls
    for a in alphas:
        xs = np.empty_like(xs_bar)
        us = np.empty_like(us_bar)
        xs[0] = xs_bar[0]
        ok = True
        for t in range(N):
            us[t] = us_bar[t] + a * ws.k[t] + ws.K[t] @ (xs[t] - xs_bar[t])
            xs[t + 1] = model.step(xs[t], us[t], theta)
            if not np.all(np.isfinite(xs[t + 1])):
                ok = False
                break
        if not ok:
            continue
        cand = Trajectory(xs, us)
        J = aug_cost.total(cand)
        if J < J0:
            return cand, J, a
    return nominal, J0, None


@dataclass
class DdpReport:
    converged: bool
    iterations: int
    costs: list = field(default_factory=list)
    stalls: int = 0
    final_reg: float = 0.0
    max_ff: float = 0.0


def _backward_with_reg(model, cost, traj, reg, mode, theta, lin):
    while True:
        try:
            return backward_pass(model, cost, traj, reg, mode, theta, lin), reg
        except QuuNotPD as e:
            reg = REG_START if reg <= 0 else reg * REG_UP
            if reg > REG_MAX:
                raise SolverError(f"DDP: {e} even with regularization {REG_MAX:g}") from None
            log.debug("DDP regularization raised to %g (%s)", reg, e)


def solve(model, aug_cost, init, tol=1e-6, max_iters=100, mode="ilqr", theta=None):
    """Run DDP from `init` (re-rolled from its first state).

    Returns (trajectory, workspace, report). The workspace is evaluated at
    the returned trajectory with the smallest regularization that works,
    zero whenever Q_uu is already positive definite.
    """
    traj = model.rollout(init.states[0], init.controls, theta)
    J = aug_cost.total(traj)
    report = DdpReport(converged=False, iterations=0, costs=[J])
    reg = 0.0
    lin = linearize(model, traj, theta)
    ws = None
    for _ in range(max_iters + 1):
        ws, reg = _backward_with_reg(model, aug_cost, traj, reg, mode, theta, lin)
        if ws.max_ff <= tol:
            report.converged = True
            break
        if report.iterations >= max_iters:
            break
        cand, Jc, alpha = forward_pass(model, traj, ws, aug_cost, ALPHAS, theta, J)
        if alpha is None:
            report.stalls += 1
            reg = REG_START if reg <= 0 else reg * REG_UP
            if reg > REG_MAX:
                log.warning("DDP stalled: line search failed at regularization cap")
                break
            continue
        traj, J = cand, Jc
        lin = linearize(model, traj, theta)
        report.iterations += 1
        report.costs.append(J)
        reg = reg / REG_DOWN
        if reg < REG_START:
            reg = 0.0
    if ws.reg != 0.0:
        # re-evaluate at the accepted trajectory with minimal regularization
        ws, reg = _backward_with_reg(model, aug_cost, traj, 0.0, mode, theta, lin)
    report.final_reg = ws.reg
    report.max_ff = ws.max_ff
    if not report.converged:
        report.converged = ws.max_ff <= tol
    if not report.converged:
        log.warning("DDP did not converge in %d iterations (max |k| = %.3g)",
                    max_iters, ws.max_ff)
    return traj, ws, report
