"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from admmddp import admm, gradsolver as gs, meta, multilift as ml
from admmddp.admm import consensus_toy, consensus_toy_theta
from admmddp.core import map_theta
from test_gradsolver import random_aux, solve_all, stacked

ROOT = Path(__file__).resolve().parents[1]
E3 = np.array([0.0, 0.0, 1.0])


def test_c1_solver_equivalence(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(50):
        n, m = rng.integers(1, 5, size=2)
        p, N = int(rng.integers(1, 9)), int(rng.integers(1, 21))
        aux = random_aux(rng, N, int(n), int(m), p, with_ft=bool(i % 2))
        (Xr, Ur), (Xp, Up), (Xa, Ua) = solve_all(aux)
        for A, B in ((Xr, Xp), (Xr, Xa), (Ur, Up), (Ur, Ua)):
            worst = max(worst, gs.rel_err(A, B))
    elapsed = time.perf_counter() - t0
    criterion(1, worst <= 1e-8, f"worst pairwise rel err {worst:.2e} (tol 1e-8)", elapsed, 10)


def test_c2_pipeline_gradient(criterion):
    t0 = time.perf_counter()
    prob = consensus_toy().with_options(ddp_tol=1e-12)
    hp = consensus_toy_theta()
    fwd = admm.run(prob, hp, 20)
    g, _ = gs.run(prob, fwd, hp)
    fd = gs.finite_difference_oracle(prob, hp, 20, h=1e-5)
    e_fd = max(gs.rel_err(stacked(getattr(g, k)), stacked(fd[k])) for k in ("X", "U", "Xc", "Uc"))
    cen = gs.centralized_qp_oracle(prob, fwd, hp)
    e_cen = max(gs.rel_err(stacked(g.X), stacked(cen.X)), gs.rel_err(stacked(g.U), stacked(cen.U)))
    elapsed = time.perf_counter() - t0
    criterion(2, e_fd <= 1e-3 and e_cen <= 1e-4,
              f"finite-difference rel err {e_fd:.2e} (tol 1e-3), centralized {e_cen:.2e} (tol 1e-4)",
              elapsed, 60)


def test_c3_multilift_error_metric(criterion):
    t0 = time.perf_counter()
    cfg = ml.MultiliftConfig(N=20)
    task = ml.Task(np.array([0.02, 0.01, 0.0]))
    rp = ml.reference_problem(cfg, task)
    rres = admm.run(rp, map_theta(np.full(ml.REF_LAYOUT.size, 0.5), ml.REF_LAYOUT), 5)
    full = ml.full_problem(cfg, task, ml.cable_references(rp, rres.last))
    hp = map_theta(np.full(ml.FULL_LAYOUT.size, 0.5), ml.FULL_LAYOUT)
    fwd = admm.run(full, hp, 2)
    G = {s: gs.run(full, fwd, hp, solver=s)[0] for s in ("reuse", "pmp", "augmented")}
    worst = max(gs.paper_metric(G["reuse"].X[i], G[s].X[i])
                for s in ("pmp", "augmented") for i in range(len(full.agents)))
    elapsed = time.perf_counter() - t0
    criterion(3, worst < 0.1, f"worst relative-error metric {worst:.2e} (tol 0.1)", elapsed, 120)


def test_c4_speedup(criterion):
    from admmddp.cli import bench_shapes

    t0 = time.perf_counter()
    rows = bench_shapes(N=100, repeats=20)
    med = {(r["shape"], r["solver"]): r["median"] for r in rows}
    shapes = sorted({r["shape"] for r in rows})
    ordered = all(med[s, "reuse"] < min(med[s, "pmp"], med[s, "augmented"]) for s in shapes)
    gain = {s: 1 - med[s, "reuse"] / med[s, "augmented"] for s in shapes}
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{s}: reuse {1e3 * med[s, 'reuse']:.1f} ms, pmp {1e3 * med[s, 'pmp']:.1f} ms, "
                       f"augmented {1e3 * med[s, 'augmented']:.1f} ms ({100 * gain[s]:.0f}% faster)"
                       for s in shapes)
    criterion(4, ordered and max(gain.values()) >= 0.4, detail, elapsed, 600)


def test_c5_truncation_bound(criterion):
    t0 = time.perf_counter()
    table = gs.truncation_error_check(consensus_toy(), consensus_toy_theta(), levels=(1, 2, 5, 10),
                                      a_fp=40)
    s = table.summary
    tot = np.array(s["grad_dev_total"])
    ok = np.isfinite(s["max_ratio"]) and s["max_ratio"] <= 10 * s["median_ratio"] \
        and np.all(np.diff(tot) <= 0)
    elapsed = time.perf_counter() - t0
    criterion(5, ok, f"ratio max {s['max_ratio']:.3f} vs median {s['median_ratio']:.3f}, "
                     f"deviation by level {np.round(tot, 4).tolist()}", elapsed, 60)


def test_c6_centralized_hessian_psd(criterion):
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    cfg = ml.MultiliftConfig(N=5)
    hang = np.r_[E3, 0.0, 0.0, 0.0, cfg.m_l * cfg.g / cfg.n, 0.0]
    refs = [(np.tile(hang, (cfg.N + 1, 1)), np.zeros((cfg.N, 4)))] * cfg.n
    worst = np.inf
    for _ in range(20):
        r, a = rng.uniform(0, 0.04), rng.uniform(0, 2 * np.pi)
        task = ml.Task(np.array([r * np.cos(a), r * np.sin(a), 0.0]))
        prob = ml.full_problem(cfg, task, refs)
        hp = map_theta(rng.uniform(0.05, 0.95, ml.FULL_LAYOUT.size), ml.FULL_LAYOUT)
        fwd = admm.run(prob, hp, 1)
        worst = min(worst, gs.centralized_qp_oracle(prob, fwd, hp).hessian_min_eig)
    elapsed = time.perf_counter() - t0
    criterion(6, worst >= -1e-10, f"smallest Hessian eigenvalue {worst:.3e} (tol -1e-10)",
              elapsed, 30)


@pytest.fixture(scope="module")
def training_runs():
    runs = {}
    for mode in ("adaptive", "fixed"):
        cfg = meta.TrainConfig(M=10, episodes_ref=30, episodes=30, seed=0,
                               fixed_hyperparams=mode == "fixed", multilift={"N": 20})
        t0 = time.perf_counter()
        runs[mode] = (meta.train(cfg), time.perf_counter() - t0)
    return runs


def _reduction(curve):
    curve = np.asarray(curve)
    return 1 - curve.min() / curve[0]


def test_c7_training_efficacy(criterion, training_runs):
    res, t_ad = training_runs["adaptive"]
    fix, t_fx = training_runs["fixed"]
    red_ref, red_full = _reduction(res.ref_curve), _reduction(res.curve)
    beats = res.curve[-1] < fix.curve[-1]
    detail = (f"loss reduction reference {100 * red_ref:.1f}%, multilift {100 * red_full:.1f}% "
              f"(need 50% each); final multilift loss adaptive {res.curve[-1]:.4f} vs fixed "
              f"{fix.curve[-1]:.4f}; reference final adaptive {res.ref_curve[-1]:.4f} vs fixed "
              f"{fix.ref_curve[-1]:.4f}")
    criterion(7, red_ref >= 0.5 and red_full >= 0.5 and beats, detail, t_ad + t_fx, 1800)


def test_c8_adaptivity_direction(criterion, training_runs):
    res, _ = training_runs["adaptive"]
    t0 = time.perf_counter()
    cfg = ml.MultiliftConfig(N=20)
    spreads = []
    for r in (0.003, 0.039):
        task = ml.Task(np.array([r, 0.0, 0.0]))
        prob = ml.reference_problem(cfg, task)
        hp = map_theta(res.sources["ref"].raw(task.ref_input), ml.REF_LAYOUT)
        spreads.append(ml.tension_spread(prob, admm.run(prob, hp, 5).last))
    elapsed = time.perf_counter() - t0
    criterion(8, spreads[1] > spreads[0],
              f"tension spread {spreads[0]:.4f} N at 3 mm, {spreads[1]:.4f} N at 39 mm", elapsed, 300)


INVARIANTS = ("jacobian or gradients_match or norm_preserved or energy or residual or strictly "
              "or nonincreasing or monotone or deterministic or thread or resumed or invariants "
              "or three_solvers or feasible or null_space or wrench_identity")


def test_c9_invariant_suites(criterion):
    t0 = time.perf_counter()
    files = [f"tests/test_{m}.py" for m in ("core", "ddp", "admm", "gradsolver", "meta", "multilift")]
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           "-k", INVARIANTS, *files], cwd=ROOT, capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    criterion(9, proc.returncode == 0, f"invariant tests: {tail}", elapsed, 300)
