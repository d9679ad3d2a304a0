"""Hyperparameter networks, the upper-level loss and the two-phase trainer.

Networks map task features to raw outputs Θ ∈ (0, 1); the affine map of
`core.map_theta` turns them into θ. Gradients flow

    L → (τ*, τ̃*) → θ → Θ → network parameters

with the middle link supplied by the gradient solver and every other link
in closed form.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import admm, gradsolver
from .core import ConfigError, SolverError, map_theta

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# networks


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Mlp:
    """ReLU hidden layers, sigmoid output; parameters kept in one flat vector.

    Layout of the flat vector: for each layer, the weight matrix (out × in,
    row-major) followed by its bias.
    """

    def __init__(self, dims, params=None):
        self.dims = [int(d) for d in dims]
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ConfigError(f"bad layer dims {dims}")
        n = self.n_params
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, float).ravel()
        if params.size != n:
            raise ConfigError(f"{params.size} parameters for an MLP with {n}")
        self.params = params.copy()

    @classmethod
    def init(cls, dims, seed):
        """Uniform(±1/√fan_in) initialization from a seeded generator."""
        rng = np.random.default_rng(seed)
        parts = []
        for i, o in zip(dims[:-1], dims[1:]):
            b = 1.0 / np.sqrt(i)
            parts.append(rng.uniform(-b, b, size=o * i))
            parts.append(rng.uniform(-b, b, size=o))
        return cls(dims, np.concatenate(parts))

    @property
    def n_params(self):
        return sum(i * o + o for i, o in zip(self.dims[:-1], self.dims[1:]))

    def layers(self, params=None):
        p = self.params if params is None else params
        out, off = [], 0
        for i, o in zip(self.dims[:-1], self.dims[1:]):
            W = p[off:off + o * i].reshape(o, i)
            off += o * i
            b = p[off:off + o]
            off += o
            out.append((W, b))
        return out

    def _forward(self, x):
        x = np.asarray(x, float).ravel()
        if x.size != self.dims[0]:
            raise ConfigError(f"network expects {self.dims[0]} inputs, got {x.size}")
        acts = [x]
        pre = []
        layers = self.layers()
        for li, (W, b) in enumerate(layers):
            z = W @ acts[-1] + b
            pre.append(z)
            acts.append(_sigmoid(z) if li == len(layers) - 1 else np.maximum(z, 0.0))
        return acts, pre

    def __call__(self, x):
        return self._forward(x)[0][-1]

    def vjp(self, x, g):
        """gᵀ ∂Θ/∂params for an output cotangent g."""
        acts, pre = self._forward(x)
        layers = self.layers()
        grads = []
        out = acts[-1]
        delta = np.asarray(g, float) * out * (1.0 - out)
        for li in range(len(layers) - 1, -1, -1):
            W, _ = layers[li]
            grads.append((np.outer(delta, acts[li]).ravel(), delta))
            if li:
                delta = (W.T @ delta) * (pre[li - 1] > 0)
        flat = []
        for gw, gb in reversed(grads):
            flat += [gw, gb]
        return np.concatenate(flat)

    def jacobian(self, x):
        """∂Θ/∂params, shape (outputs, n_params)."""
        q = self.dims[-1]
        return np.stack([self.vjp(x, e) for e in np.eye(q)])


def mlp_forward(net, x):
    """Network output and a callable returning ∂Θ/∂params at the same input."""
    return net(x), (lambda: net.jacobian(x))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grad, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, episode=None):
    """Bias-corrected Adam. Returns (new params, new state)."""
    grad = np.asarray(grad, float)
    if grad.shape != np.shape(params):
        raise ConfigError(f"gradient shape {grad.shape} != parameter shape {np.shape(params)}")
    if not np.all(np.isfinite(grad)):
        where = f" in episode {episode}" if episode is not None else ""
        raise TrainingError(f"non-finite gradient{where}")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    mh = m / (1 - beta1 ** t)
    vh = v / (1 - beta2 ** t)
    return params - lr * mh / (np.sqrt(vh) + eps), AdamState(m, v, t)


# ---------------------------------------------------------------------------
# upper-level loss


@dataclass
class LossTerms:
    total: float
    tracking: list
    residual: list


def upper_loss(trajs, x_copies, u_copies, x_refs, u_refs, Wx, Wu):
    """Σ_agents |τ - τ_ref|²_W + |τ - τ̃|².

    Per agent, `Wx` (n,) and `Wu` (m,) are diagonal tracking weights.
    Returns (LossTerms, dL/dx, dL/du, dL/dx̃, dL/dũ) with lists per agent.
    """
    track, resid = [], []
    gx, gu, gxc, guc = [], [], [], []
    for tr, xc, uc, xr, ur, wx, wu in zip(trajs, x_copies, u_copies, x_refs, u_refs, Wx, Wu):
        ex = tr.states - xr
        eu = tr.controls - ur
        rx = tr.states - xc
        ru = tr.controls - uc
        track.append(float(np.sum(wx * ex * ex) + np.sum(wu * eu * eu)))
        resid.append(float(np.sum(rx * rx) + np.sum(ru * ru)))
        gx.append(2 * wx * ex + 2 * rx)
        gu.append(2 * wu * eu + 2 * ru)
        gxc.append(-2 * rx)
        guc.append(-2 * ru)
    terms = LossTerms(sum(track) + sum(resid), track, resid)
    return terms, gx, gu, gxc, guc


def default_weights(problem, position_weight=1.0, other=0.1):
    """Tracking weights: `position_weight` on positions/directions, `other` elsewhere."""
    Wx, Wu = [], []
    for spec in problem.agents:
        n, m = spec.model.state_dim, spec.model.control_dim
        wx = np.full(n, other)
        wx[:min(3, n)] = position_weight
        Wx.append(wx)
        Wu.append(np.full(m, other))
    return Wx, Wu


def theta_gradient(grad, gx, gu, gxc, guc):
    """dL/dθ = Σ (∂L/∂τ)·dτ/dθ + (∂L/∂τ̃)·dτ̃/dθ."""
    total = 0.0
    for i in range(len(gx)):
        total = total + np.einsum("kn,knp->p", gx[i], grad.X[i])
        total = total + np.einsum("km,kmp->p", gu[i], grad.U[i])
        total = total + np.einsum("kn,knp->p", gxc[i], grad.Xc[i])
        total = total + np.einsum("km,kmp->p", guc[i], grad.Uc[i])
    return np.asarray(total)


def assemble_grad(dL_dtheta, hp, blocks):
    """Network gradients from dL/dθ.

    `blocks` is a list of (segment names, network Jacobian ∂Θ/∂params); the
    Jacobian rows follow the order of the named segments. Returns one
    gradient per block.
    """
    layout = hp.layout
    dL_dtheta = np.asarray(dL_dtheta, float).ravel()
    if dL_dtheta.size != layout.size:
        raise ConfigError(f"dL/dθ has {dL_dtheta.size} entries, layout has {layout.size}")
    scale = hp.w_max - hp.w_min
    out = []
    for names, jac in blocks:
        cols = np.concatenate([layout.index(nm) for nm in names])
        if any(not layout[nm].mapped for nm in names):
            raise ConfigError("network blocks must cover mapped segments only")
        jac = np.atleast_2d(jac)
        if jac.shape[0] != cols.size:
            raise ConfigError(f"network has {jac.shape[0]} outputs for {cols.size} θ columns")
        out.append((dL_dtheta[cols] * scale) @ jac)
    return out


# ---------------------------------------------------------------------------
# one pipeline evaluation


@dataclass
class PipelineEval:
    loss: LossTerms
    dL_dtheta: np.ndarray
    forward: object
    grad: object


def pipeline_loss_grad(problem, hp, a_max, Wx=None, Wu=None, x_refs=None, u_refs=None,
                       solver="reuse", with_grad=True):
    """Run ADMM for `a_max` iterations, then the gradient pass; loss and dL/dθ."""
    fwd = admm.run(problem, hp, a_max)
    it = fwd.last
    if Wx is None:
        Wx, Wu = default_weights(problem)
    x_refs = [a.x_ref for a in problem.agents] if x_refs is None else x_refs
    u_refs = [a.u_ref for a in problem.agents] if u_refs is None else u_refs
    terms, gx, gu, gxc, guc = upper_loss(it.primal, it.x_copy, it.u_copy, x_refs, u_refs, Wx, Wu)
    if not with_grad:
        return PipelineEval(terms, None, fwd, None)
    g, _ = gradsolver.run(problem, fwd, hp, solver=solver)
    return PipelineEval(terms, theta_gradient(g, gx, gu, gxc, guc), fwd, g)


# ---------------------------------------------------------------------------
# hyperparameter sources: adaptive network or fixed (task-independent) vector


class NetworkSource:
    """Θ = MLP(features)."""

    def __init__(self, net):
        self.net = net

    @property
    def params(self):
        return self.net.params

    @params.setter
    def params(self, p):
        self.net.params = np.asarray(p, float)

    def raw(self, features):
        return self.net(features)

    def vjp(self, features, g):
        return self.net.vjp(features, g)


class FixedSource:
    """Θ = S(φ), shared by every task (the non-adaptive ablation)."""

    def __init__(self, logits):
        self.params = np.asarray(logits, float).copy()

    @classmethod
    def matching(cls, source, features_list):
        """Start from the mean output of another source over the given tasks."""
        raw = np.mean([source.raw(f) for f in features_list], axis=0)
        raw = np.clip(raw, 1e-6, 1 - 1e-6)
        return cls(np.log(raw / (1 - raw)))

    def raw(self, features):
        return _sigmoid(self.params)

    def vjp(self, features, g):
        s = _sigmoid(self.params)
        return np.asarray(g) * s * (1 - s)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    M: int = 10
    episodes_ref: int = 10
    episodes: int = 30
    lr: float = 1e-2
    lr_ref: float | None = None
    a_tc: int = 2
    ref_iters: int = 5
    seed: int = 0
    r_max: float = 0.04
    fixed_hyperparams: bool = False
    checkpoint_every: int = 0
    out_dir: str | None = None
    multilift: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    ref_curve: list
    curve: list
    ref_task_losses: list
    task_losses: list
    nets: dict
    sources: dict
    skipped: list


REF_SEGMENTS = ["ls.Q", "ls.R", "ls.QN", "ls.Rt", "ls.rho"]
LOAD_SEGMENTS = ["l.Q", "l.R", "l.QN", "l.rho"]
CABLE_SEGMENTS = ["c.Q", "c.R", "c.QN", "c.rho"]


def _episode(sources, seg_groups, feat_fns, layout, tasks, build, a_tc, episode):
    """Mean loss and mean parameter gradients over the tasks of one episode.

    `sources`, `seg_groups` and `feat_fns` align: source j maps feat_fns[j](task)
    to the raw values of segment group j. `build(task)` returns
    (problem, Wx, Wu, x_refs, u_refs).
    """
    losses = []
    grads = [np.zeros_like(s.params) for s in sources]
    for ti, task in enumerate(tasks):
        feats = [fn(task) for fn in feat_fns]
        raws = [s.raw(f) for s, f in zip(sources, feats)]
        raw = np.concatenate(raws)
        hp = map_theta(raw, layout)
        problem, Wx, Wu, xr, ur = build(task)
        try:
            ev = pipeline_loss_grad(problem, hp, a_tc, Wx, Wu, xr, ur)
        except SolverError as e:
            raise TrainingError(f"episode {episode}, task {ti}: {e}") from e
        losses.append(ev.loss.total)
        dtheta = ev.dL_dtheta * (hp.w_max - hp.w_min)
        for j, (s, names, f) in enumerate(zip(sources, seg_groups, feats)):
            cols = np.concatenate([layout.index(nm) for nm in names])
            grads[j] += s.vjp(f, dtheta[cols])
    M = len(tasks)
    return losses, [g / M for g in grads]


def _ref_feat(task):
    return task.ref_input


def _planar_feat(task):
    return task.planar_input


def _checkpoint(path, nets, states, seed, episode, phase):
    blob = dict(version=CHECKPOINT_VERSION, seed=seed, episode=episode, phase=phase,
                nets={k: dict(dims=getattr(v, "net", None) and v.net.dims,
                              params=v.params.tolist(),
                              adam=dict(m=states[k].m.tolist(), v=states[k].v.tolist(),
                                        t=states[k].t))
                      for k, v in nets.items()})
    with open(path, "w") as f:
        json.dump(blob, f)


def load_checkpoint(path):
    with open(path) as f:
        blob = json.load(f)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {blob.get('version')}")
    out = {}
    for k, v in blob["nets"].items():
        if v["dims"] is not None:
            out[k] = NetworkSource(Mlp(v["dims"], v["params"]))
        else:
            out[k] = FixedSource(v["params"])
    return out, blob


def _run_phase(name, sources, seg_groups, feat_fns, layout, tasks, build, cfg, episodes, lr,
               ckpt_every, out_dir, all_sources, states):
    curve, per_task, skipped = [], [], []
    for ep in range(episodes + 1):
        try:
            losses, grads = _episode(sources, seg_groups, feat_fns, layout, tasks, build,
                                     cfg.a_tc, ep)
        except TrainingError as e:
            log.warning("%s: skipping episode %d: %s", name, ep, e)
            skipped.append((name, ep))
            curve.append(float("nan"))
            per_task.append([])
            continue
        curve.append(float(np.mean(losses)))
        per_task.append(losses)
        log.info("%s episode %d: mean loss %.6g", name, ep, curve[-1])
        if ep == episodes:
            break      # last entry evaluates the final parameters
        for j, s in enumerate(sources):
            key = [k for k, v in all_sources.items() if v is s][0]
            s.params, states[key] = adam_step(s.params, grads[j], states[key], lr, episode=ep)
        if ckpt_every and out_dir and (ep + 1) % ckpt_every == 0:
            _checkpoint(f"{out_dir}/{name}_ep{ep + 1:03d}.json", all_sources, states,
                        cfg.seed, ep + 1, name)
    return curve, per_task, skipped


def train(cfg):
    """Two-phase meta-training over a seeded task set.

    Phase 1 learns the reference-problem network on ‖r_g‖; phase 2 freezes
    it, exports cable references per task and learns the load and cable
    networks on the planar r_g. Each curve has episodes + 1 entries (the
    last evaluates the final parameters).
    """
    from . import multilift as ml

    mcfg = ml.MultiliftConfig.from_dict(cfg.multilift) if cfg.multilift else ml.MultiliftConfig()
    tasks = ml.sample_tasks(cfg.M, cfg.seed, cfg.r_max)
    nets = dict(ref=Mlp.init([1, 16, 32, 36], cfg.seed + 1),
                load=Mlp.init([2, 16, 32, 33], cfg.seed + 2),
                cable=Mlp.init([2, 10, 20, 21], cfg.seed + 3))
    sources = {k: NetworkSource(v) for k, v in nets.items()}
    if cfg.fixed_hyperparams:
        sources = {"ref": FixedSource.matching(sources["ref"], [t.ref_input for t in tasks]),
                   "load": FixedSource.matching(sources["load"], [t.planar_input for t in tasks]),
                   "cable": FixedSource.matching(sources["cable"],
                                                 [t.planar_input for t in tasks])}
    states = {k: AdamState.zeros(v.params.size) for k, v in sources.items()}

    ref_problems = {}

    def build_ref(task):
        key = id(task)
        if key not in ref_problems:
            ref_problems[key] = ml.reference_problem(mcfg, task)
        prob = ref_problems[key]
        Wx, Wu = default_weights(prob)
        return prob, Wx, Wu, None, None

    ref_curve, ref_per_task, skipped = _run_phase(
        "reference", [sources["ref"]], [REF_SEGMENTS], [_ref_feat], ml.REF_LAYOUT, tasks, build_ref, cfg,
        cfg.episodes_ref, cfg.lr_ref or cfg.lr, cfg.checkpoint_every, cfg.out_dir, sources,
        states)

    # cable references from the frozen phase-1 source
    full_problems = {}
    for task in tasks:
        prob = ref_problems.get(id(task)) or ml.reference_problem(mcfg, task)
        hp = map_theta(sources["ref"].raw(task.ref_input), ml.REF_LAYOUT)
        try:
            fwd = admm.run(prob, hp, cfg.ref_iters)
        except SolverError as e:
            raise TrainingError(f"cable references for task r_g={task.r_g}: {e}") from e
        refs = ml.cable_references(prob, fwd.last)
        full_problems[id(task)] = ml.full_problem(mcfg, task, refs)

    def build_full(task):
        prob = full_problems[id(task)]
        Wx, Wu = default_weights(prob)
        return prob, Wx, Wu, None, None

    curve, per_task, sk2 = _run_phase(
        "multilift", [sources["load"], sources["cable"]], [LOAD_SEGMENTS, CABLE_SEGMENTS],
        [_planar_feat, _planar_feat], ml.FULL_LAYOUT, tasks, build_full, cfg, cfg.episodes, cfg.lr, cfg.checkpoint_every,
        cfg.out_dir, sources, states)
    if cfg.out_dir:
        _checkpoint(f"{cfg.out_dir}/final.json", sources, states, cfg.seed,
                    cfg.episodes, "multilift")
    return TrainResult(ref_curve, curve, ref_per_task, per_task, nets, sources, skipped + sk2)
