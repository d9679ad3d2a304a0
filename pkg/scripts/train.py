"""Meta-train the hyperparameter networks on the 3-cable lift and compare with fixed θ."""
import argparse
import json

from admmddp import meta


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--M", type=int, default=10)
    ap.add_argument("--episodes-ref", type=int, default=30)
    ap.add_argument("--episodes", type=int, default=30)
    ap.add_argument("--N", type=int, default=20)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="write both curves to this JSON file")
    args = ap.parse_args()
    curves = {}
    for fixed in (False, True):
        cfg = meta.TrainConfig(M=args.M, episodes_ref=args.episodes_ref, episodes=args.episodes,
                               lr=args.lr, seed=args.seed, fixed_hyperparams=fixed,
                               multilift={"N": args.N})
        res = meta.train(cfg)
        name = "fixed" if fixed else "adaptive"
        curves[name] = dict(reference=res.ref_curve, multilift=res.curve)
        for phase, c in curves[name].items():
            print(f"{name:>8} {phase:>9}: {c[0]:.4f} -> {c[-1]:.4f} "
                  f"(min {min(c):.4f}, {100 * (1 - min(c) / c[0]):.1f}% lower)")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(curves, f, indent=1)


if __name__ == "__main__":
    main()
