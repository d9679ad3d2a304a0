"""Cable-suspended multilift benchmark.

A rigid load (13 states, wrench input) carried by n taut cables, each
modeled by its direction, angular rate, tension and tension rate. Two
problems are built on top of the generic ADMM machinery:

* the cable-reference problem: the load alone, with the cable tensions
  parameterized as t = P⁺u + NΠ and the tension/kinematic constraints on
  the safe copies;
* the full problem: the load and every cable as separate agents, coupled
  in the static subproblem by tension, separation, obstacle and thrust
  constraints plus a wrench-consistency penalty.

Dynamics Jacobians are analytic (implicit differentiation of the 6×6
acceleration solve, chained through RK4 and the renormalization). Stage
terms use jax for their z-derivatives.
"""
from __future__ import annotations

import functools
import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .admm import LS_BATCH, AdmmOptions, AgentSpec, InfeasibleError, MultiAgentProblem, StageTerms
from .core import AgentModel, ConfigError, SolverError, ThetaLayout, WeightBinding

log = logging.getLogger(__name__)

G = 9.81
E3 = np.array([0.0, 0.0, 1.0])
QUAT_ID = np.array([1.0, 0.0, 0.0, 0.0])


class DynamicsError(SolverError):
    pass


class AugmentationError(SolverError):
    pass


# ---------------------------------------------------------------------------
# rotation helpers (q = [w, x, y, z], body → world)


def skew(a):
    return np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])


def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def quat_to_rot(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_times_jac(q, v, transpose=False):
    """∂(R(q) v)/∂q, or ∂(R(q)ᵀ v)/∂q, as a 3×4 matrix.

    Uses R v = v + 2w(q_v×v) + 2q_v×(q_v×v), valid for any 4-vector q.
    """
    w, qv = q[0], q[1:]
    s = -1.0 if transpose else 1.0
    a = _cross(qv, v)
    out = np.empty((3, 4))
    out[:, 0] = s * 2.0 * a
    out[:, 1:] = -s * 2.0 * w * skew(v) - 2.0 * skew(a) - 2.0 * skew(qv) @ skew(v)
    return out


def omega_matrix(w):
    """Ω(ω) with q̇ = ½Ω(ω)q."""
    out = np.zeros((4, 4))
    out[0, 1:] = -w
    out[1:, 0] = w
    out[1:, 1:] = -skew(w)
    return out


def _xi_matrix(q):
    """Ω(ω)q = Ξ(q)ω."""
    out = np.empty((4, 3))
    out[0] = -q[1:]
    out[1:] = q[0] * np.eye(3) + skew(q[1:])
    return out


# ---------------------------------------------------------------------------
# configuration


def symmetric_attachments(n, radius):
    ang = 2 * np.pi * np.arange(n) / n
    return np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(n)], axis=1)


def wrench_matrix(attach):
    """P = [[I … I], [r_1× … r_n×]] (6 × 3n)."""
    n = attach.shape[0]
    P = np.zeros((6, 3 * n))
    for i, r in enumerate(attach):
        P[:3, 3 * i:3 * i + 3] = np.eye(3)
        P[3:, 3 * i:3 * i + 3] = skew(r)
    return P


@dataclass
class MultiliftConfig:
    """Physical rig, limits and discretization.

    `attach` defaults to n points evenly spaced on a circle of `radius` in
    the load's body xy-plane; `t_max` defaults to 3·m_l·g/n.
    """
    n: int = 3
    m_l: float = 3.0
    J_l: tuple = (0.1875, 0.1875, 0.375)
    r_g: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    attach: np.ndarray | None = None
    cable_len: float | tuple = 1.0
    m_q: float | tuple = 1.0
    t_min: float = 1.0
    t_max: float | None = None
    f_max: float = 60.0
    d_q: float = 0.5
    d_o: float = 0.5
    obstacles: tuple = ((0.75, 1.0, 1.0), (0.75, -1.0, 1.0))
    dt: float = 0.1
    N: int = 20
    g: float = G
    w_wrench: float = 1.0

    def __post_init__(self):
        if self.n < 3:
            raise ConfigError(f"need at least 3 cables, got {self.n}")
        J = np.asarray(self.J_l, float)
        self.J_l = np.diag(J) if J.ndim == 1 else J
        self.r_g = np.asarray(self.r_g, float)
        if self.attach is None:
            self.attach = symmetric_attachments(self.n, self.radius)
        self.attach = np.asarray(self.attach, float)
        if self.attach.shape != (self.n, 3):
            raise ConfigError(f"attach has shape {self.attach.shape}, expected ({self.n}, 3)")
        self.cable_len = np.broadcast_to(np.asarray(self.cable_len, float), (self.n,)).copy()
        self.m_q = np.broadcast_to(np.asarray(self.m_q, float), (self.n,)).copy()
        if self.t_max is None:
            self.t_max = 3.0 * self.m_l * self.g / self.n
        self.obstacles = np.asarray(self.obstacles, float).reshape(-1, 3)
        if np.linalg.matrix_rank(self.P) < 6:
            raise ConfigError("wrench map P is rank deficient (degenerate attachments)")

    @property
    def P(self):
        return wrench_matrix(self.attach)

    @property
    def t_ref(self):
        return np.array([0.0, 0.0, self.m_l * self.g / self.n])

    def with_r_g(self, r_g):
        d = self.to_dict()
        d["r_g"] = list(np.asarray(r_g, float))
        return MultiliftConfig.from_dict(d)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        d["J_l"] = np.asarray(self.J_l).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(extra))}")
        return cls(**d)


def wrench_and_nullspace(config, R_l, tensions, directions):
    """Net body-frame wrench of the cables, with P, its null-space basis and P⁺.

    `tensions` (n,) and world-frame unit `directions` (n, 3).
    """
    P = config.P
    if np.linalg.matrix_rank(P) < 6:
        raise ConfigError("wrench map P is rank deficient")
    f = (np.asarray(tensions, float)[:, None] * np.asarray(directions, float)) @ R_l
    w = P @ f.ravel()
    return w, P, scipy.linalg.null_space(P), np.linalg.pinv(P)


# ---------------------------------------------------------------------------
# dynamics


def _rk4_with_jac(f, fjac, x, u, h):
    """Classic RK4 step and its Jacobians (without renormalization)."""
    n = x.size
    k1 = f(x, u)
    A1, B1 = fjac(x, u)
    x2 = x + 0.5 * h * k1
    k2 = f(x2, u)
    A2, B2 = fjac(x2, u)
    x3 = x + 0.5 * h * k2
    k3 = f(x3, u)
    A3, B3 = fjac(x3, u)
    x4 = x + h * k3
    k4 = f(x4, u)
    A4, B4 = fjac(x4, u)
    I = np.eye(n)
    dk1x, dk1u = A1, B1
    dk2x = A2 @ (I + 0.5 * h * dk1x)
    dk2u = A2 @ (0.5 * h * dk1u) + B2
    dk3x = A3 @ (I + 0.5 * h * dk2x)
    dk3u = A3 @ (0.5 * h * dk2u) + B3
    dk4x = A4 @ (I + h * dk3x)
    dk4u = A4 @ (h * dk3u) + B4
    xn = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    Fx = I + h / 6.0 * (dk1x + 2 * dk2x + 2 * dk3x + dk4x)
    Fu = h / 6.0 * (dk1u + 2 * dk2u + 2 * dk3u + dk4u)
    return xn, Fx, Fu


def _rk4(f, x, u, h):
    k1 = f(x, u)
    k2 = f(x + 0.5 * h * k1, u)
    k3 = f(x + 0.5 * h * k2, u)
    k4 = f(x + h * k3, u)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _normalize_block(xn, Fx, Fu, sl):
    v = xn[sl]
    nv = np.linalg.norm(v)
    if not np.isfinite(nv) or nv == 0.0:
        raise DynamicsError("non-finite or zero-norm state after integration")
    vh = v / nv
    D = (np.eye(v.size) - np.outer(vh, vh)) / nv
    xn = xn.copy()
    xn[sl] = vh
    if Fx is not None:
        Fx = Fx.copy()
        Fu = Fu.copy()
        Fx[sl] = D @ Fx[sl]
        Fu[sl] = D @ Fu[sl]
    return xn, Fx, Fu


class LoadModel(AgentModel):
    """Rigid load with CoM offset r_g; x = [p, v_body, q, ω], u = [F, M] (body)."""

    state_dim = 13
    control_dim = 6

    def __init__(self, config):
        self.cfg = config
        self.m = config.m_l
        self.J = np.asarray(config.J_l, float)
        self.r = np.asarray(config.r_g, float)
        self.g = config.g
        self.dt = config.dt
        rx = skew(self.r)
        A = np.zeros((6, 6))
        A[:3, :3] = np.eye(3)
        A[:3, 3:] = -rx
        A[3:, :3] = self.m * rx
        A[3:, 3:] = self.J
        if np.linalg.cond(A) > 1e12:
            raise DynamicsError("load acceleration coupling matrix is singular")
        self.A = A
        self.Ainv = np.linalg.inv(A)

    def _rhs(self, v, q, w, u):
        m, r, J, g = self.m, self.r, self.J, self.g
        gb = quat_to_rot(q).T @ (g * E3)
        b1 = u[:3] / m - _cross(w, v + _cross(w, r)) - gb
        b2 = u[3:] - m * _cross(r, gb) - _cross(w, J @ w) - m * _cross(r, _cross(w, v))
        return np.concatenate([b1, b2])

    def accel(self, x, u):
        """(v̇, ω̇) from the coupled translational/rotational equations."""
        x = np.asarray(x, float)
        acc = self.Ainv @ self._rhs(x[3:6], x[6:10], x[10:13], np.asarray(u, float))
        return acc[:3], acc[3:]

    def f(self, x, u):
        v, q, w = x[3:6], x[6:10], x[10:13]
        acc = self.Ainv @ self._rhs(v, q, w, u)
        return np.concatenate([quat_to_rot(q) @ v, acc[:3], 0.5 * omega_matrix(w) @ q, acc[3:]])

    def f_jac(self, x, u):
        m, r, J, g = self.m, self.r, self.J, self.g
        v, q, w = x[3:6], x[6:10], x[10:13]
        R = quat_to_rot(q)
        A = np.zeros((13, 13))
        B = np.zeros((13, 6))
        A[0:3, 3:6] = R
        A[0:3, 6:10] = rot_times_jac(q, v)
        dgb = g * rot_times_jac(q, E3, transpose=True)
        rx, wx = skew(r), skew(w)
        s = v + _cross(w, r)
        db = np.zeros((6, 13))
        db[:3, 3:6] = -wx
        db[:3, 6:10] = -dgb
        db[:3, 10:13] = skew(s) + wx @ rx
        db[3:, 3:6] = -m * rx @ wx
        db[3:, 6:10] = -m * rx @ dgb
        db[3:, 10:13] = skew(J @ w) - wx @ J + m * rx @ skew(v)
        dacc = self.Ainv @ db
        A[3:6] = dacc[:3]
        A[10:13] = dacc[3:]
        A[6:10, 6:10] = 0.5 * omega_matrix(w)
        A[6:10, 10:13] = 0.5 * _xi_matrix(q)
        Bu = np.zeros((6, 6))
        Bu[:3, :3] = np.eye(3) / m
        Bu[3:, 3:] = np.eye(3)
        du = self.Ainv @ Bu
        B[3:6] = du[:3]
        B[10:13] = du[3:]
        return A, B

    def step(self, x, u, theta=None, dt=None):
        h = self.dt if dt is None else dt
        xn = _rk4(self.f, np.asarray(x, float), np.asarray(u, float), h)
        if not np.all(np.isfinite(xn)):
            raise DynamicsError("load state became non-finite")
        return _normalize_block(xn, None, None, slice(6, 10))[0]

    def jacobians(self, x, u, theta=None):
        xn, Fx, Fu = _rk4_with_jac(self.f, self.f_jac, np.asarray(x, float),
                                   np.asarray(u, float), self.dt)
        _, Fx, Fu = _normalize_block(xn, Fx, Fu, slice(6, 10))
        return Fx, Fu

    def energy(self, x):
        """Kinetic + potential energy (meaningful for r_g = 0)."""
        v, w = x[3:6], x[10:13]
        return 0.5 * self.m * v @ v + 0.5 * w @ self.J @ w + self.m * self.g * x[2]


class CableModel(AgentModel):
    """Taut cable; x = [d, ω, t, v], u = [γ, a]."""

    state_dim = 8
    control_dim = 4

    def __init__(self, dt=0.1):
        self.dt = dt

    @staticmethod
    def f(x, u):
        d, w = x[:3], x[3:6]
        return np.concatenate([_cross(w, d), u[:3], [x[7], u[3]]])

    @staticmethod
    def f_jac(x, u):
        d, w = x[:3], x[3:6]
        A = np.zeros((8, 8))
        B = np.zeros((8, 4))
        A[:3, :3] = skew(w)
        A[:3, 3:6] = -skew(d)
        A[6, 7] = 1.0
        B[3:6, :3] = np.eye(3)
        B[7, 3] = 1.0
        return A, B

    def step(self, x, u, theta=None, dt=None):
        h = self.dt if dt is None else dt
        xn = _rk4(self.f, np.asarray(x, float), np.asarray(u, float), h)
        if not np.all(np.isfinite(xn)):
            raise DynamicsError("cable state became non-finite")
        return _normalize_block(xn, None, None, slice(0, 3))[0]

    def jacobians(self, x, u, theta=None):
        xn, Fx, Fu = _rk4_with_jac(self.f, self.f_jac, np.asarray(x, float),
                                   np.asarray(u, float), self.dt)
        _, Fx, Fu = _normalize_block(xn, Fx, Fu, slice(0, 3))
        return Fx, Fu



def load_accel(x, u, config):
    """(v̇, ω̇) of the load for state x and body wrench u."""
    x = np.asarray(x, float)
    if abs(np.linalg.norm(x[6:10]) - 1.0) > 1e-6:
        raise DynamicsError("load quaternion is not unit-norm")
    return LoadModel(config).accel(x, u)


def load_step(x, u, config, dt=None):
    return LoadModel(config).step(x, u, dt=dt)


def cable_step(x, u, dt):
    return CableModel(dt).step(x, u)


# ---------------------------------------------------------------------------
# tasks and references


@dataclass
class Task:
    """One transport task: CoM offset and a straight-line load motion."""
    r_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    start: tuple = (0.0, 0.0, 0.0)
    goal: tuple = (1.5, 0.0, 0.0)

    def __post_init__(self):
        self.r_g = np.asarray(self.r_g, float)

    @property
    def ref_input(self):
        """Input of the reference-problem network: ‖r_g‖."""
        return np.array([np.linalg.norm(self.r_g)])

    @property
    def planar_input(self):
        """Input of the load/cable networks: planar [x, y] of r_g."""
        return self.r_g[:2].copy()


def sample_tasks(M, seed, r_max=0.04):
    """M tasks with ‖r_g‖ ~ U(0, r_max) and a uniformly random planar angle."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(M):
        r = rng.uniform(0.0, r_max)
        a = rng.uniform(0.0, 2 * np.pi)
        out.append(Task(np.array([r * np.cos(a), r * np.sin(a), 0.0])))
    return out


def load_reference(config, task):
    """Minimum-jerk line from start to goal, level attitude.

    The reference wrench is the quasi-static one for the task's r_g:
    F = m(a + g e₃), M = r_g × F.
    """
    N, dt = config.N, config.dt
    T = N * dt
    start = np.asarray(task.start, float)
    delta = np.asarray(task.goal, float) - start
    tau = np.arange(N + 1) / N
    s = 10 * tau ** 3 - 15 * tau ** 4 + 6 * tau ** 5
    ds = (30 * tau ** 2 - 60 * tau ** 3 + 30 * tau ** 4) / T
    dds = (60 * tau - 180 * tau ** 2 + 120 * tau ** 3) / T ** 2
    x_ref = np.zeros((N + 1, 13))
    x_ref[:, :3] = start + s[:, None] * delta
    x_ref[:, 3:6] = ds[:, None] * delta
    x_ref[:, 6:10] = QUAT_ID
    acc = dds[:N, None] * delta
    F = config.m_l * (acc + config.g * E3)
    M = np.cross(np.asarray(task.r_g, float), F)
    u_ref = np.hstack([F, M])
    return x_ref, u_ref


# ---------------------------------------------------------------------------
# jax stage terms

_JAX = None


def _jax():
    global _JAX
    if _JAX is None:
        import jax
        jax.config.update("jax_enable_x64", True)
        import jax.numpy as jnp
        _JAX = (jax, jnp)
    return _JAX


def _jrot(q):
    _, jnp = _jax()
    w, x, y, z = q[0], q[1], q[2], q[3]
    return jnp.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _kinematic_ineq(pq, P):
    """Separation and obstacle constraints on quadrotor positions (n, 3)."""
    _, jnp = _jax()
    n = pq.shape[0]
    out = []
    for i, j in itertools.combinations(range(n), 2):
        r = pq[i] - pq[j]
        out.append(P["d_q"] ** 2 - r @ r)
    if P["obstacles"].shape[0]:
        r = pq[:, None, :] - P["obstacles"][None, :, :]
        out.append((P["d_o"] ** 2 - jnp.sum(r * r, axis=2)).ravel())
    return out


def _stack(parts):
    _, jnp = _jax()
    return jnp.concatenate([jnp.atleast_1d(p) for p in parts])


# cable-reference problem: z = [x̃_l (13), ũ_l (6), Π (3n-6)]

def _ref_tensions(z, P):
    n = P["attach"].shape[0]
    return (P["Pplus"] @ z[13:19] + P["Nmat"] @ z[19:]).reshape(n, 3)


def _ref_cost(z, w, P):
    _, jnp = _jax()
    t = _ref_tensions(z, P)
    return 0.5 * jnp.sum(w * (t - P["t_ref"]) ** 2)


def _ref_ineq(z, P):
    _, jnp = _jax()
    t = _ref_tensions(z, P)
    nt2 = jnp.sum(t * t, axis=1)
    q = z[6:10]
    R = _jrot(q / jnp.linalg.norm(q))
    dirs = t / jnp.sqrt(nt2)[:, None]
    pq = z[:3] + (P["attach"] + P["cable_len"][:, None] * dirs) @ R.T
    return _stack([nt2 - P["t_max"] ** 2, P["t_min"] ** 2 - nt2] + _kinematic_ineq(pq, P))


def _ref_term_ineq(z, P):
    _, jnp = _jax()
    return jnp.zeros(0)


# full problem stage: z = [x̃_l, ũ_l, (x̃_i, ũ_i) for each cable]

def _full_split(z, n, stage=True):
    _, jnp = _jax()
    xl = z[:13]
    off = 19 if stage else 13
    ul = z[13:19] if stage else None
    w = 12 if stage else 8
    cab = z[off:off + w * n].reshape(n, w)
    return xl, ul, cab


def _quad_positions(xl, d, P):
    _, jnp = _jax()
    q = xl[6:10]
    R = _jrot(q / jnp.linalg.norm(q))
    dh = d / jnp.linalg.norm(d, axis=1)[:, None]
    return xl[:3] + P["attach"] @ R.T + P["cable_len"][:, None] * dh, R, dh


def _full_cost(z, w, P):
    _, jnp = _jax()
    n = P["attach"].shape[0]
    xl, ul, cab = _full_split(z, n)
    R = _jrot(xl[6:10] / jnp.linalg.norm(xl[6:10]))
    d = cab[:, :3]
    dh = d / jnp.linalg.norm(d, axis=1)[:, None]
    f_body = (cab[:, 6:7] * dh) @ R
    r = P["P"] @ f_body.ravel() - ul
    return 0.5 * P["w_wrench"] * r @ r


def _full_ineq(z, P):
    _, jnp = _jax()
    n = P["attach"].shape[0]
    xl, ul, cab = _full_split(z, n)
    t = cab[:, 6]
    pq, R, dh = _quad_positions(xl, cab[:, :3], P)
    # load accelerations and quadrotor accelerations
    v, w = xl[3:6], xl[10:13]
    gb = R.T @ (P["g"] * jnp.array([0.0, 0.0, 1.0]))
    m, r, J = P["m_l"], P["r_g"], P["J_l"]
    b1 = ul[:3] / m - jnp.cross(w, v + jnp.cross(w, r)) - gb
    b2 = ul[3:] - m * jnp.cross(r, gb) - jnp.cross(w, J @ w) - m * jnp.cross(r, jnp.cross(w, v))
    acc = P["Ainv"] @ jnp.concatenate([b1, b2])
    vd, wd = acc[:3], acc[3:]
    a_att = (vd + jnp.cross(w, v))[None, :] + jnp.cross(wd[None, :], P["attach"]) \
        + jnp.cross(w[None, :], jnp.cross(w[None, :], P["attach"]))
    wc, gam = cab[:, 3:6], cab[:, 8:11]
    dd = jnp.cross(gam, dh) + jnp.cross(wc, jnp.cross(wc, dh))
    pdd = a_att @ R.T + P["cable_len"][:, None] * dd
    thrust = P["m_q"][:, None] * (pdd + P["g"] * jnp.array([0.0, 0.0, 1.0])) + t[:, None] * dh
    return _stack([t - P["t_max"], P["t_min"] - t] + _kinematic_ineq(pq, P)
                  + [jnp.sum(thrust * thrust, axis=1) - P["f_max"] ** 2])


def _full_term_ineq(z, P):
    n = P["attach"].shape[0]
    xl, _, cab = _full_split(z, n, stage=False)
    t = cab[:, 6]
    pq, _, _ = _quad_positions(xl, cab[:, :3], P)
    return _stack([t - P["t_max"], P["t_min"] - t] + _kinematic_ineq(pq, P))


def _zero_cost(z, w, P):
    _, jnp = _jax()
    return jnp.zeros(())


@functools.lru_cache(maxsize=None)
def _compiled(cost_fn, ineq_fn):
    """Batched jitted evaluators for one (cost, ineq) pair."""
    jax, jnp = _jax()

    def barrier(z, w, mu, P):
        g = ineq_fn(z, P)
        return cost_fn(z, w, P) - mu * jnp.sum(jnp.log(-g))

    def safe_barrier(z, w, mu, P):
        g = ineq_fn(z, P)
        feas = jnp.all(g < 0)
        val = cost_fn(z, w, P) - mu * jnp.sum(jnp.log(jnp.where(g < 0, -g, 1.0)))
        return jnp.where(feas, val, jnp.inf)

    vm = lambda fn, ax=(0, None, None): jax.jit(jax.vmap(fn, in_axes=ax))
    return dict(
        cost=vm(cost_fn),
        cost_grad=vm(jax.grad(cost_fn)),
        cost_hess=vm(jax.hessian(cost_fn)),
        cost_theta=vm(jax.jacfwd(jax.grad(cost_fn), argnums=1)),
        g=vm(ineq_fn, (0, None)),
        g_jac=vm(jax.jacfwd(ineq_fn), (0, None)),
        g_hess=vm(jax.hessian(ineq_fn), (0, None)),
        bar_all=vm(lambda z, w, mu, P: (barrier(z, w, mu, P), jax.grad(barrier)(z, w, mu, P),
                                        jax.hessian(barrier)(z, w, mu, P)), (0, None, None, None)),
        bar_safe=vm(safe_barrier, (0, None, None, None)),
    )


class JaxTerms(StageTerms):
    """Stage terms from scalar jax functions cost(z, w, P) and ineq(z, P).

    `w` is a small weight vector read from θ at `theta_cols` (or the
    constant `w_const` when the cost does not depend on θ). Batches are
    padded to `batch` rows so each evaluator compiles once.
    """

    def __init__(self, cost_fn, ineq_fn, params, names, n_extra=0, theta_cols=None,
                 w_const=None, batch=1):
        self.fns = _compiled(cost_fn, ineq_fn)
        _, jnp = _jax()
        self.params = {k: jnp.asarray(v) for k, v in params.items()}
        self.names = tuple(names)
        self.n_extra = n_extra
        self.theta_cols = None if theta_cols is None else np.asarray(theta_cols)
        self.w_const = np.zeros(1) if w_const is None else np.asarray(w_const, float)
        self.batch = int(batch)

    def _w(self, theta):
        if self.theta_cols is None:
            return self.w_const
        return np.asarray(theta, float)[self.theta_cols]

    def _call(self, name, Z, *args):
        """Evaluate a batched function on fixed-size (padded) chunks of Z."""
        B = Z.shape[0]
        fn = self.fns[name]
        size = self.batch if B <= self.batch or name != "bar_safe" else self.batch * LS_BATCH
        outs = []
        for s in range(0, B, size):
            chunk = Z[s:s + size]
            m = chunk.shape[0]
            if m < size:
                chunk = np.vstack([chunk, np.repeat(chunk[:1], size - m, axis=0)])
            res = fn(chunk, *args)
            if isinstance(res, tuple):
                outs.append(tuple(np.asarray(r)[:m] for r in res))
            else:
                outs.append(np.asarray(res)[:m])
        if len(outs) == 1:
            return outs[0]
        if isinstance(outs[0], tuple):
            return tuple(np.concatenate(parts, axis=0) for parts in zip(*outs))
        return np.concatenate(outs, axis=0)

    def cost(self, Z, ks, theta, order=2):
        w, P = self._w(theta), self.params
        val = self._call("cost", Z, w, P)
        if order == 0:
            return val
        return val, self._call("cost_grad", Z, w, P), self._call("cost_hess", Z, w, P)

    def cost_theta(self, Z, ks, theta):
        if self.theta_cols is None:
            return None
        B, d = Z.shape
        out = np.zeros((B, d, np.asarray(theta).size))
        out[:, :, self.theta_cols] = self._call("cost_theta", Z, self._w(theta), self.params)
        return out

    def ineq(self, Z, ks, order=2):
        P = self.params
        g = self._call("g", Z, P)
        if order == 0:
            return g
        out = (g, self._call("g_jac", Z, P))
        if order >= 2:
            out = out + (self._call("g_hess", Z, P),)
        return out

    def barrier_value(self, Z, ks, theta, mu):
        return self._call("bar_safe", Z, self._w(theta), float(mu), self.params)

    def barrier(self, Z, ks, theta, mu):
        return self._call("bar_all", Z, self._w(theta), float(mu), self.params)


def _common_params(config):
    P = config.P
    return dict(
        attach=config.attach, cable_len=config.cable_len, t_max=config.t_max,
        t_min=config.t_min, d_q=config.d_q, d_o=config.d_o,
        obstacles=config.obstacles, P=P, g=config.g,
    )


def _kin_names(config, prefix=""):
    n = config.n
    names = [f"separation[{i},{j}]" for i, j in itertools.combinations(range(n), 2)]
    names += [f"obstacle[{i},{o}]" for i in range(n) for o in range(config.obstacles.shape[0])]
    return names


# ---------------------------------------------------------------------------
# θ layouts

REF_LAYOUT = ThetaLayout([("ls.Q", 13), ("ls.R", 6), ("ls.QN", 13), ("ls.Rt", 3), ("ls.rho", 1)])
FULL_LAYOUT = ThetaLayout([("l.Q", 13), ("l.R", 6), ("l.QN", 13), ("l.rho", 1),
                           ("c.Q", 8), ("c.R", 4), ("c.QN", 8), ("c.rho", 1)])


# ---------------------------------------------------------------------------
# problem builders


def reference_problem(config, task, options=None):
    """Single-agent cable-reference problem (load + null-space allocation Π)."""
    config = config.with_r_g(task.r_g)
    # the vertical tension components must at least carry the weight
    if config.t_min >= config.t_max or config.n * config.t_max <= config.m_l * config.g:
        raise InfeasibleError(
            f"tension allocation infeasible: {config.n} cables with t in "
            f"[{config.t_min:g}, {config.t_max:g}] N cannot carry {config.m_l:g} kg")
    P = config.P
    Pplus = np.linalg.pinv(P)
    Nmat = scipy.linalg.null_space(P)
    x_ref, u_ref = load_reference(config, task)
    model = LoadModel(config)
    agent = AgentSpec("load", model, x_ref[0].copy(), x_ref, u_ref,
                      WeightBinding("ls.Q", "ls.R", "ls.QN", "ls.rho"))
    params = _common_params(config)
    params.update(Pplus=Pplus, Nmat=Nmat, t_ref=config.t_ref)
    n = config.n
    names = [f"tension_max[{i}]" for i in range(n)] + [f"tension_min[{i}]" for i in range(n)]
    names += _kin_names(config)
    stage = JaxTerms(_ref_cost, _ref_ineq, params, names, n_extra=3 * n - 6,
                     theta_cols=REF_LAYOUT.index("ls.Rt"), batch=config.N)
    prob = MultiAgentProblem([agent], REF_LAYOUT, config.N, stage, None,
                             options or AdmmOptions())
    prob.config = config
    prob.task = task
    return prob


def reference_tensions(problem, iterate):
    """Body-frame tensions t_k = P⁺ũ_k + NΠ_k, shape (N, n, 3)."""
    cfg = problem.config
    P = cfg.P
    t = iterate.u_copy[0] @ np.linalg.pinv(P).T + iterate.extra @ scipy.linalg.null_space(P).T
    return t.reshape(problem.N, cfg.n, 3)


def cable_references(problem, iterate):
    """Cable waypoints from a solved reference problem.

    Direction in the world frame d = R(q̃)t/‖t‖ and magnitude ‖t‖; angular
    rate, tension rate and controls are zero. The last step repeats the
    final stage values. Returns a list of (x_ref (N+1, 8), u_ref (N, 4)).
    """
    cfg = problem.config
    t = reference_tensions(problem, iterate)
    N = problem.N
    out = []
    qs = iterate.x_copy[0][:, 6:10]
    for i in range(cfg.n):
        x_ref = np.zeros((N + 1, 8))
        for k in range(N + 1):
            kk = min(k, N - 1)
            R = quat_to_rot(qs[k] / np.linalg.norm(qs[k]))
            ti = t[kk, i]
            nt = np.linalg.norm(ti)
            if nt == 0.0:
                raise SolverError(f"zero reference tension for cable {i} at step {kk}")
            x_ref[k, :3] = R @ (ti / nt)
            x_ref[k, 6] = nt
        out.append((x_ref, np.zeros((N, 4))))
    return out


def full_problem(config, task, cable_refs, options=None):
    """Load and n cables as agents; coupling terms in the static subproblem."""
    config = config.with_r_g(task.r_g)
    x_ref, u_ref = load_reference(config, task)
    agents = [AgentSpec("load", LoadModel(config), x_ref[0].copy(), x_ref, u_ref,
                        WeightBinding("l.Q", "l.R", "l.QN", "l.rho"))]
    cm = CableModel(config.dt)
    for i, (xr, ur) in enumerate(cable_refs):
        agents.append(AgentSpec(f"cable{i + 1}", cm, xr[0].copy(), xr, ur,
                                WeightBinding("c.Q", "c.R", "c.QN", "c.rho")))
    load = LoadModel(config)
    params = _common_params(config)
    params.update(m_l=config.m_l, r_g=config.r_g, J_l=config.J_l, Ainv=load.Ainv,
                  m_q=config.m_q, f_max=config.f_max, w_wrench=config.w_wrench)
    n = config.n
    tnames = [f"tension_max[{i}]" for i in range(n)] + [f"tension_min[{i}]" for i in range(n)]
    kin = _kin_names(config)
    stage = JaxTerms(_full_cost, _full_ineq, params,
                     tnames + kin + [f"thrust[{i}]" for i in range(n)], batch=config.N)
    terminal = JaxTerms(_zero_cost, _full_term_ineq, params, tnames + kin, batch=1)
    prob = MultiAgentProblem(agents, FULL_LAYOUT, config.N, stage, terminal,
                             options or AdmmOptions())
    prob.config = config
    prob.task = task
    return prob


def tension_spread(problem, iterate):
    """Mean over steps of max_i ‖t_i‖ - min_i ‖t_i‖ (reference problem)."""
    t = np.linalg.norm(reference_tensions(problem, iterate), axis=2)
    return float(np.mean(t.max(axis=1) - t.min(axis=1)))


# ---------------------------------------------------------------------------
# closed-loop reference augmentation


def feedback_augmentation(x_l, x_opt, t_opt, d_opt, K, alpha, config):
    """Cable directions corrected by the load's DDP feedback gain.

    δt = α P⁺ K (x_l - x*) gives body-frame tension corrections; they are
    rotated by R(q*) before being added to t*_i d*_i (world frame).
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    x_l = np.asarray(x_l, float)
    x_opt = np.asarray(x_opt, float)
    dt_body = alpha * np.linalg.pinv(config.P) @ (np.asarray(K) @ (x_l - x_opt))
    R = quat_to_rot(x_opt[6:10] / np.linalg.norm(x_opt[6:10]))
    dt_world = dt_body.reshape(config.n, 3) @ R.T
    f = np.asarray(t_opt, float)[:, None] * np.asarray(d_opt, float) + dt_world
    nf = np.linalg.norm(f, axis=1)
    if np.any(nf < 1e-12):
        raise AugmentationError("tension correction cancels a cable force")
    return f / nf[:, None]


# ---------------------------------------------------------------------------
# gradient-benchmark instances

GRADIENT_SHAPES = {"13x36": ("load", 36), "13x54": ("load", 54), "8x54": ("cable", 54)}


def gradient_instance(shape, N=100, seed=0, config=None):
    """Matrix-LQR instance with the given gradient shape and its DDP workspace.

    The LQR blocks come from a converged DDP solve of the load (or one
    cable) tracking its reference with random diagonal weights; the θ
    forcing blocks are random. Returns (AuxLqrData, DdpWorkspace).
    """
    from . import ddp
    from .core import QuadraticCost
    from .gradsolver import AuxLqrData

    if shape not in GRADIENT_SHAPES:
        raise ConfigError(f"unknown gradient shape {shape!r}; choose from {sorted(GRADIENT_SHAPES)}")
    kind, p = GRADIENT_SHAPES[shape]
    rng = np.random.default_rng(seed)
    cfg = MultiliftConfig.from_dict({**(config or MultiliftConfig()).to_dict(), "N": N})
    if kind == "load":
        model = LoadModel(cfg)
        x_ref, u_ref = load_reference(cfg, Task())
        x0 = x_ref[0].copy()
    else:
        model = CableModel(cfg.dt)
        x_ref = np.zeros((N + 1, 8))
        x_ref[:, 2] = 1.0
        x_ref[:, 6] = cfg.m_l * cfg.g / cfg.n
        u_ref = np.zeros((N, 4))
        x0 = x_ref[0].copy()
        x0[:3] = np.array([0.2, -0.1, 1.0]) / np.linalg.norm([0.2, -0.1, 1.0])
    n, m = model.state_dim, model.control_dim
    cost = QuadraticCost(rng.uniform(1, 100, n), rng.uniform(0.1, 10, m),
                         rng.uniform(1, 100, n), x_ref, u_ref)
    init = model.rollout(x0, u_ref)
    _, ws, _ = ddp.solve(model, ddp.AugmentedCost(cost), init, tol=1e-8, max_iters=200)
    aux = AuxLqrData(Hxx=np.concatenate([ws.lxx, ws.lxxN[None]]), Hxu=ws.lxu, Huu=ws.luu,
                     Hxt=rng.normal(size=(N + 1, n, p)), Hut=rng.normal(size=(N, m, p)),
                     fx=ws.fx, fu=ws.fu)
    return aux, ws
