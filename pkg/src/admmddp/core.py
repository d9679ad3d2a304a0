"""Problem-description types shared by the solvers.

Agents, diagonal quadratic costs, trajectories and the structured
hyperparameter vector with its named segment layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

W_MIN = 0.01
W_MAX = 1000.0


class ConfigError(ValueError):
    """Inconsistent dimensions or layouts."""


class DomainError(ValueError):
    """An input lies outside the domain of a map."""


class SolverError(RuntimeError):
    """A numerical solver failed; the message names where."""


# ---------------------------------------------------------------------------
# dynamics


class AgentModel:
    """Discrete-time dynamics x' = f(x, u) with Jacobians.

    Subclasses implement ``step`` and ``jacobians``. The hyperparameter
    argument is accepted for generality; none of the built-in models depend
    on it, so ``jac_theta`` returns None (read as zero by the solvers).
    """

    state_dim: int
    control_dim: int

    def step(self, x, u, theta=None):
        raise NotImplementedError

    def jacobians(self, x, u, theta=None):
        """Return (f_x, f_u)."""
        raise NotImplementedError

    def jac_x(self, x, u, theta=None):
        return self.jacobians(x, u, theta)[0]

    def jac_u(self, x, u, theta=None):
        return self.jacobians(x, u, theta)[1]

    def jac_theta(self, x, u, theta=None):
        return None

    def second_derivatives(self, x, u, theta=None, h=1e-6):
        """Return (f_xx, f_xu, f_uu) with f_xx[i] the Hessian of component i.

        Default: central differences of the analytic Jacobians.
        """
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        n, m = x.size, u.size
        fxx = np.zeros((n, n, n))
        fxu = np.zeros((n, n, m))
        fuu = np.zeros((n, m, m))
        for j in range(n):
            e = np.zeros(n)
            e[j] = h * max(1.0, abs(x[j]))
            ap, bp = self.jacobians(x + e, u, theta)
            am, bm = self.jacobians(x - e, u, theta)
            fxx[:, :, j] = (ap - am) / (2 * e[j])
            fxu[:, j, :] = (bp - bm) / (2 * e[j])
        for j in range(m):
            e = np.zeros(m)
            e[j] = h * max(1.0, abs(u[j]))
            _, bp = self.jacobians(x, u + e, theta)
            _, bm = self.jacobians(x, u - e, theta)
            fuu[:, :, j] = (bp - bm) / (2 * e[j])
        fxx = 0.5 * (fxx + fxx.transpose(0, 2, 1))
        fuu = 0.5 * (fuu + fuu.transpose(0, 2, 1))
        return fxx, fxu, fuu

    def rollout(self, x0, controls, theta=None):
        controls = np.asarray(controls, float)
        xs = np.empty((controls.shape[0] + 1, self.state_dim))
        xs[0] = x0
        for k, u in enumerate(controls):
            xs[k + 1] = self.step(xs[k], u, theta)
        return Trajectory(xs, controls.copy())


class LinearAgent(AgentModel):
    def __init__(self, A, B):
        self.A = np.array(A, float)
        self.B = np.array(B, float)
        self.state_dim = self.A.shape[0]
        self.control_dim = self.B.shape[1]

    def step(self, x, u, theta=None):
        return self.A @ x + self.B @ u

    def jacobians(self, x, u, theta=None):
        return self.A, self.B

    def second_derivatives(self, x, u, theta=None, h=None):
        n, m = self.state_dim, self.control_dim
        return np.zeros((n, n, n)), np.zeros((n, n, m)), np.zeros((n, m, m))


def make_linear_test_agent(state_dim, control_dim, A, B):
    A = np.atleast_2d(np.asarray(A, float))
    B = np.asarray(B, float)
    if B.ndim == 1:
        B = B.reshape(state_dim, -1)
    if A.shape != (state_dim, state_dim):
        raise ConfigError(f"A has shape {A.shape}, expected {(state_dim, state_dim)}")
    if B.shape != (state_dim, control_dim):
        raise ConfigError(f"B has shape {B.shape}, expected {(state_dim, control_dim)}")
    return LinearAgent(A, B)


def double_integrator(dt=0.1, dims=1):
    """Point mass in `dims` axes; state [pos, vel], control acceleration."""
    A1 = np.array([[1.0, dt], [0.0, 1.0]])
    B1 = np.array([[0.5 * dt * dt], [dt]])
    A = np.kron(A1, np.eye(dims))
    B = np.kron(B1, np.eye(dims))
    return make_linear_test_agent(2 * dims, dims, A, B)


# ---------------------------------------------------------------------------
# trajectories and costs


@dataclass
class Trajectory:
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, float)
        self.controls = np.asarray(self.controls, float)
        if self.states.ndim != 2 or self.controls.ndim != 2:
            raise ConfigError("states and controls must be 2-D arrays")
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise ConfigError(
                f"{self.states.shape[0]} states for {self.controls.shape[0]} controls; "
                "need exactly N+1 and N")
        if self.controls.shape[0] < 1:
            raise ConfigError("horizon must be positive")

    @property
    def N(self):
        return self.controls.shape[0]

    def copy(self):
        return Trajectory(self.states.copy(), self.controls.copy())


@dataclass
class QuadraticCost:
    """Diagonal tracking cost.

    sum_k ½|x_k - xr_k|²_Q + ½|u_k - ur_k|²_R  +  ½|x_N - xr_N|²_QN
    """
    Q: np.ndarray
    R: np.ndarray
    QN: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray

    def __post_init__(self):
        for name in ("Q", "R", "QN", "x_ref", "u_ref"):
            setattr(self, name, np.asarray(getattr(self, name), float))
        n, m = self.Q.size, self.R.size
        if self.x_ref.shape[1:] != (n,) or self.u_ref.shape[1:] != (m,):
            raise ConfigError("reference dimensions do not match weights")
        if self.x_ref.shape[0] != self.u_ref.shape[0] + 1:
            raise ConfigError("x_ref must have one more row than u_ref")
        if min(self.Q.min(), self.R.min(), self.QN.min()) < 0:
            raise ConfigError("weights must be nonnegative")

    @property
    def N(self):
        return self.u_ref.shape[0]

    def total(self, traj):
        dx = traj.states - self.x_ref
        du = traj.controls - self.u_ref
        return 0.5 * (np.sum(dx[:-1] ** 2 * self.Q) + np.sum(du ** 2 * self.R)
                      + np.sum(dx[-1] ** 2 * self.QN))


# ---------------------------------------------------------------------------
# hyperparameters


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    size: int
    mapped: bool = True

    @property
    def slice(self):
        return slice(self.start, self.start + self.size)


class ThetaLayout:
    """Named contiguous segments of the flat hyperparameter vector."""

    def __init__(self, sizes):
        """`sizes` is a list of (name, size) or (name, size, mapped)."""
        segs = []
        off = 0
        for item in sizes:
            name, size = item[0], int(item[1])
            mapped = bool(item[2]) if len(item) > 2 else True
            if size <= 0:
                raise ConfigError(f"segment {name!r} has size {size}")
            if any(s.name == name for s in segs):
                raise ConfigError(f"duplicate segment {name!r}")
            segs.append(Segment(name, off, size, mapped))
            off += size
        self.segments = tuple(segs)
        self.size = off
        self._by_name = {s.name: s for s in segs}

    def __getitem__(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise ConfigError(f"no segment named {name!r}") from None

    def __contains__(self, name):
        return name in self._by_name

    def index(self, name):
        s = self[name]
        return np.arange(s.start, s.start + s.size)

    @property
    def mapped_index(self):
        idx = [np.arange(s.start, s.start + s.size) for s in self.segments if s.mapped]
        return np.concatenate(idx) if idx else np.zeros(0, int)

    @property
    def fixed_index(self):
        idx = [np.arange(s.start, s.start + s.size) for s in self.segments if not s.mapped]
        return np.concatenate(idx) if idx else np.zeros(0, int)

    def names(self):
        return [s.name for s in self.segments]

    def __eq__(self, other):
        return isinstance(other, ThetaLayout) and self.segments == other.segments

    def __repr__(self):
        body = ", ".join(f"{s.name}[{s.start}:{s.start + s.size}]" for s in self.segments)
        return f"ThetaLayout({body})"


@dataclass(frozen=True)
class HyperParams:
    theta: np.ndarray
    raw: np.ndarray
    layout: ThetaLayout
    w_min: float = W_MIN
    w_max: float = W_MAX

    def __getitem__(self, name):
        return self.theta[self.layout[name].slice]

    @property
    def p(self):
        return self.layout.size

    @property
    def dtheta_draw(self):
        """Diagonal of ∂θ/∂Θ over the mapped components."""
        return np.full(self.raw.size, self.w_max - self.w_min)


def map_theta(raw, layout, w_min=W_MIN, w_max=W_MAX, fixed=None):
    """θ = w_min + (w_max - w_min)·raw on mapped segments.

    `raw` covers the mapped components in layout order; `fixed` supplies
    the unmapped ones verbatim.
    """
    raw = np.asarray(raw, float).ravel()
    midx = layout.mapped_index
    if raw.size != midx.size:
        raise ConfigError(f"raw has {raw.size} entries, layout maps {midx.size}")
    if np.any(raw <= 0.0) or np.any(raw >= 1.0) or not np.all(np.isfinite(raw)):
        bad = int(np.flatnonzero(~((raw > 0) & (raw < 1)))[0])
        raise DomainError(f"raw[{bad}]={raw[bad]} outside (0, 1)")
    theta = np.zeros(layout.size)
    theta[midx] = w_min + (w_max - w_min) * raw
    fidx = layout.fixed_index
    if fidx.size:
        if fixed is None:
            raise ConfigError("layout has unmapped segments but no fixed values given")
        theta[fidx] = np.asarray(fixed, float).ravel()
    raw.setflags(write=False)
    theta.setflags(write=False)
    return HyperParams(theta, raw, layout, w_min, w_max)


def direct_theta(theta, layout, w_min=W_MIN, w_max=W_MAX):
    """HyperParams from θ values directly (inverse of the map on mapped segments)."""
    theta = np.array(theta, float).ravel()
    if theta.size != layout.size:
        raise ConfigError(f"theta has {theta.size} entries, layout has {layout.size}")
    midx = layout.mapped_index
    raw = (theta[midx] - w_min) / (w_max - w_min)
    theta.setflags(write=False)
    raw.setflags(write=False)
    return HyperParams(theta, raw, layout, w_min, w_max)


@dataclass(frozen=True)
class WeightBinding:
    """Where an agent's Q, R, QN and ρ come from.

    Each entry is either a segment name of the layout or a constant array.
    """
    Q: object
    R: object
    QN: object
    rho: object

    def resolve(self, theta, layout):
        out = []
        for v in (self.Q, self.R, self.QN, self.rho):
            if isinstance(v, str):
                out.append(np.asarray(theta[layout[v].slice], float))
            else:
                out.append(np.atleast_1d(np.asarray(v, float)))
        Q, R, QN, rho = out
        return Q, R, QN, float(rho[0])

    def columns(self, layout):
        """θ-column index arrays (or None when constant) for Q, R, QN, ρ."""
        out = []
        for v in (self.Q, self.R, self.QN, self.rho):
            out.append(layout.index(v) if isinstance(v, str) else None)
        return tuple(out)


@dataclass
class Report:
    """Free-form solver diagnostics."""
    converged: bool = True
    iterations: int = 0
    messages: list = field(default_factory=list)
