"""Command-line entry point: optimize, gradcheck, bench, train, export.

Scenario files are JSON:

    {
      "schema": 1,
      "kind": "toy" | "reference" | "multilift",
      "toy": {"N": 10, "box": null, "separation": null, "terminal_only": false},
      "multilift": {...MultiliftConfig fields...},
      "task": {"r_g": [0.03, 0, 0], "start": [0, 0, 0], "goal": [1.5, 0, 0]},
      "ref_iters": 5,
      "train": {...TrainConfig fields...}
    }

θ files (--theta) hold either {"theta": [...]} (direct values),
{"raw": [...]} (network outputs in (0, 1)) or a training checkpoint.
Exit codes: 0 success, 1 usage error, 2 solver or oracle failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import statistics
import sys
import time

import numpy as np

from . import __version__, admm, gradsolver, meta
from . import multilift as ml
from .core import ConfigError, DomainError, SolverError, direct_theta, map_theta

log = logging.getLogger("admmddp")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2
SOLVERS = ("reuse", "pmp", "augmented")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# scenario and θ loading


def load_scenario(path):
    if path is None:
        return {"schema": SCHEMA_VERSION, "kind": "toy"}
    try:
        with open(path) as f:
            scn = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read scenario {path}: {e}") from None
    if scn.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise UsageError(f"unsupported scenario schema {scn.get('schema')}")
    if scn.get("kind", "toy") not in ("toy", "reference", "multilift"):
        raise UsageError(f"unknown scenario kind {scn.get('kind')!r}")
    scn.setdefault("kind", "toy")
    return scn


def _task(scn):
    t = scn.get("task", {})
    return ml.Task(**{k: tuple(v) for k, v in t.items()})


def _mcfg(scn):
    return ml.MultiliftConfig.from_dict(scn.get("multilift", {}))


def _read_theta(path):
    if path is None:
        return None
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read θ file {path}: {e}") from None


def _hp_from(blob, layout, key, features):
    """HyperParams for `layout` from a θ blob (None → raw 0.5 everywhere)."""
    if blob is None:
        return map_theta(np.full(layout.size, 0.5), layout)
    if "nets" in blob:
        sources, _ = _sources_from_checkpoint(blob)
        parts = [sources[k].raw(features[k]) for k in key]
        return map_theta(np.concatenate(parts), layout)
    if "theta" in blob:
        return direct_theta(np.asarray(blob["theta"], float), layout)
    if "raw" in blob:
        return map_theta(np.asarray(blob["raw"], float), layout)
    raise UsageError("θ file needs a 'theta', 'raw' or 'nets' entry")


def _sources_from_checkpoint(blob):
    out = {}
    for k, v in blob["nets"].items():
        if v.get("dims"):
            out[k] = meta.NetworkSource(meta.Mlp(v["dims"], v["params"]))
        else:
            out[k] = meta.FixedSource(v["params"])
    return out, blob


def build(scn, theta_blob, threads=1):
    """(problem, hp) for a scenario; multilift scenarios solve their reference problem first."""
    opts = admm.AdmmOptions(threads=threads)
    kind = scn["kind"]
    if kind == "toy":
        kw = dict(scn.get("toy", {}))
        prob = admm.consensus_toy(options=opts, **kw)
        if theta_blob is None:
            hp = admm.consensus_toy_theta()
        elif "theta" in theta_blob:
            hp = direct_theta(np.asarray(theta_blob["theta"], float), prob.layout)
        else:
            hp = _hp_from(theta_blob, prob.layout, (), {})
        return prob, hp
    cfg, task = _mcfg(scn), _task(scn)
    feats = {"ref": task.ref_input, "load": task.planar_input, "cable": task.planar_input}
    ref = ml.reference_problem(cfg, task, opts)
    if kind == "reference":
        return ref, _hp_from(theta_blob, ml.REF_LAYOUT, ("ref",), feats)
    if theta_blob is not None and "nets" in theta_blob:
        hp_ref = _hp_from(theta_blob, ml.REF_LAYOUT, ("ref",), feats)
    else:
        hp_ref = _hp_from(None, ml.REF_LAYOUT, (), feats)
    fwd = admm.run(ref, hp_ref, int(scn.get("ref_iters", 5)))
    prob = ml.full_problem(cfg, task, ml.cable_references(ref, fwd.last), opts)
    return prob, _hp_from(theta_blob, ml.FULL_LAYOUT, ("load", "cable"), feats)


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v):
    return repr(float(v))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([c if isinstance(c, str) else (str(c) if isinstance(c, (int, np.integer))
                                                      else _fmt(c)) for c in r])


def _cell(c):
    if c == "":
        return np.nan
    try:
        return float(c)
    except ValueError:
        return c


def read_csv(path):
    """Header and rows of a file written by write_csv.

    Blank cells become nan. The rows come back as a float array, or as an
    object array when some column holds text (e.g. agent names).
    """
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    body = [[_cell(c) for c in r] for r in rows[1:]]
    text = any(isinstance(c, str) for r in body for c in r)
    return rows[0], np.array(body, dtype=object if text else float)


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_manifest(out, command, config, seed):
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    write_json(os.path.join(out, "manifest.json"), dict(
        command=command, version=__version__, seed=seed,
        config_hash=hashlib.sha256(canon.encode()).hexdigest(), config=config))


def _layout_json(layout):
    return [[seg.name, seg.size] for seg in layout.segments]


def _traj_rows(states, controls):
    N = controls.shape[0]
    rows = []
    for k in range(N + 1):
        u = controls[k] if k < N else [""] * controls.shape[1]
        rows.append([k, *states[k], *u])
    return rows


def _traj_header(n, m, xs="x", us="u"):
    return ["step"] + [f"{xs}{j}" for j in range(n)] + [f"{us}{j}" for j in range(m)]


# ---------------------------------------------------------------------------
# commands


def cmd_optimize(args, scn, theta_blob, out):
    prob, hp = build(scn, theta_blob, args.threads)
    iters = args.iters or 10
    res = admm.run(prob, hp, iters)
    last = res.last
    for i, spec in enumerate(prob.agents):
        n, m = spec.model.state_dim, spec.model.control_dim
        write_csv(os.path.join(out, f"agent_{spec.name}.csv"), _traj_header(n, m),
                  _traj_rows(last.primal[i].states, last.primal[i].controls))
        write_csv(os.path.join(out, f"copies_{spec.name}.csv"), _traj_header(n, m),
                  _traj_rows(last.x_copy[i], last.u_copy[i]))
        write_csv(os.path.join(out, f"duals_{spec.name}.csv"), _traj_header(n, m, "lam", "xi"),
                  _traj_rows(last.lam[i], last.xi[i]))
    rows = []
    rep = res.report
    for a in range(len(res.iterates)):
        for i, spec in enumerate(prob.agents):
            rows.append([a + 1, spec.name, rep.x[a, i], rep.u[a, i], rep.aggregate[a]])
    write_csv(os.path.join(out, "residuals.csv"),
              ["iteration", "agent", "primal_residual_x", "primal_residual_u", "aggregate"], rows)
    write_json(os.path.join(out, "theta.json"),
               dict(layout=_layout_json(prob.layout), theta=hp.theta.tolist()))
    return dict(iterations=len(res.iterates), final_residual=float(rep.aggregate[-1]))


def cmd_gradcheck(args, scn, theta_blob, out):
    prob, hp = build(scn, theta_blob, args.threads)
    iters = args.iters or 5
    fwd = admm.run(prob, hp, iters)
    grads = {s: gradsolver.run(prob, fwd, hp, solver=s, threads=args.threads)[0] for s in SOLVERS}
    report = dict(iterations=iters, p=hp.p, agents=[a.name for a in prob.agents], pairwise={},
                  finite_difference=None)
    for a, b in (("reuse", "pmp"), ("reuse", "augmented"), ("pmp", "augmented")):
        report["pairwise"][f"{a}-{b}"] = [
            dict(agent=spec.name,
                 paper_metric=gradsolver.paper_metric(grads[a].X[i], grads[b].X[i]),
                 rel_err=gradsolver.rel_err(grads[b].X[i], grads[a].X[i]))
            for i, spec in enumerate(prob.agents)]
    if hp.p <= 60 and not args.no_fd:
        fd = gradsolver.finite_difference_oracle(prob, hp, iters, h=args.h)
        report["finite_difference"] = [
            dict(agent=spec.name,
                 paper_metric=gradsolver.paper_metric(fd["X"][i], grads["reuse"].X[i]),
                 rel_err=gradsolver.rel_err(grads["reuse"].X[i], fd["X"][i]))
            for i, spec in enumerate(prob.agents)]
    write_json(os.path.join(out, "gradcheck.json"), report)
    return report


def bench_shapes(N=100, repeats=20, seed=0, shapes=None):
    """Median and IQR wall time (s) of the three LQR solvers per gradient shape.

    The Hessian blocks and DDP workspace are built before timing; each
    solver gets one discarded warm-up call.
    """
    calls = {"reuse": lambda aux, ws: gradsolver.aux_lqr_reuse(aux, ws),
             "pmp": lambda aux, ws: gradsolver.aux_lqr_pmp_oracle(aux),
             "augmented": lambda aux, ws: gradsolver.aux_lqr_augmented_oracle(aux)}
    rows = []
    for shape in shapes or ml.GRADIENT_SHAPES:
        aux, ws = ml.gradient_instance(shape, N, seed)
        for name, fn in calls.items():
            fn(aux, ws)
            ts = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn(aux, ws)
                ts.append(time.perf_counter() - t0)
            q = statistics.quantiles(ts, n=4)
            rows.append(dict(shape=shape, solver=name, median=statistics.median(ts),
                             iqr=q[2] - q[0], repeats=repeats))
    return rows


def cmd_bench(args, scn, theta_blob, out):
    if args.repeats < 20:
        raise UsageError("bench needs --repeats >= 20")
    rows = bench_shapes(args.N, args.repeats, args.seed or 0)
    write_csv(os.path.join(out, "bench.csv"), ["shape", "solver", "median_s", "iqr_s", "repeats"],
              [[r["shape"], r["solver"], r["median"], r["iqr"], r["repeats"]] for r in rows])
    write_json(os.path.join(out, "bench.json"), rows)
    return rows


def train_config(scn, args, out):
    kw = dict(scn.get("train", {}))
    if scn.get("multilift"):
        kw["multilift"] = scn["multilift"]
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.iters:
        kw["a_tc"] = args.iters
    if args.fixed_hyperparams:
        kw["fixed_hyperparams"] = True
    kw["out_dir"] = out
    try:
        return meta.TrainConfig(**kw)
    except TypeError as e:
        raise UsageError(f"bad train config: {e}") from None


def write_curve(path, curve, per_task):
    M = max((len(t) for t in per_task), default=0)
    rows = [[ep, c, *(t if t else [float("nan")] * M)] for ep, (c, t) in
            enumerate(zip(curve, per_task))]
    write_csv(path, ["episode", "mean_loss"] + [f"task_{j}" for j in range(M)], rows)


def cmd_train(args, scn, theta_blob, out):
    cfg = train_config(scn, args, out)
    res = meta.train(cfg)
    write_curve(os.path.join(out, "loss_reference.csv"), res.ref_curve, res.ref_task_losses)
    write_curve(os.path.join(out, "loss_multilift.csv"), res.curve, res.task_losses)
    return dict(reference=res.ref_curve, multilift=res.curve, skipped=res.skipped)


def cmd_export(args, scn, theta_blob, out):
    if theta_blob is None or "nets" not in theta_blob:
        raise UsageError("export needs --theta pointing at a training checkpoint")
    task = _task(scn)
    feats = {"ref": task.ref_input, "load": task.planar_input, "cable": task.planar_input}
    hp_ref = _hp_from(theta_blob, ml.REF_LAYOUT, ("ref",), feats)
    hp = _hp_from(theta_blob, ml.FULL_LAYOUT, ("load", "cable"), feats)
    blob = dict(task=dict(r_g=list(task.r_g)),
                reference=dict(layout=_layout_json(ml.REF_LAYOUT), theta=hp_ref.theta.tolist(),
                               raw=hp_ref.raw.tolist()),
                multilift=dict(layout=_layout_json(ml.FULL_LAYOUT), theta=hp.theta.tolist(),
                               raw=hp.raw.tolist()))
    write_json(os.path.join(out, "theta_export.json"), blob)
    return blob


COMMANDS = dict(optimize=cmd_optimize, gradcheck=cmd_gradcheck, bench=cmd_bench,
                train=cmd_train, export=cmd_export)


def parser():
    p = argparse.ArgumentParser(prog="admmddp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--scenario", help="scenario JSON (default: consensus toy)")
    p.add_argument("--theta", help="θ JSON or training checkpoint")
    p.add_argument("--iters", type=int, help="ADMM iterations a_max (training: a_tc)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--fixed-hyperparams", action="store_true",
                   help="train a shared θ instead of networks (ablation)")
    p.add_argument("--h", type=float, default=1e-5, help="gradcheck finite-difference step")
    p.add_argument("--no-fd", action="store_true", help="gradcheck: skip finite differences")
    p.add_argument("--N", type=int, default=100, help="bench horizon")
    p.add_argument("--repeats", type=int, default=20, help="bench repeats")
    return p


def main(argv=None):
    level = os.environ.get("L2C_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        scn = load_scenario(args.scenario)
        theta_blob = _read_theta(args.theta)
        os.makedirs(args.out, exist_ok=True)
        config = dict(scenario=scn, theta=theta_blob, iters=args.iters, threads=args.threads,
                      fixed_hyperparams=args.fixed_hyperparams, N=args.N, repeats=args.repeats,
                      h=args.h)
        write_manifest(args.out, args.command, config, args.seed)
        summary = COMMANDS[args.command](args, scn, theta_blob, args.out)
    except (UsageError, ConfigError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, meta.TrainingError) as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_FAILURE
    if args.command in ("optimize", "train"):
        print(json.dumps(summary, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
