"""Gradient deviation of truncated ADMM runs against a long run on the consensus toy."""
import argparse

import numpy as np

from admmddp import gradsolver as gs
from admmddp.admm import consensus_toy, consensus_toy_theta


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--levels", type=int, nargs="+", default=[1, 2, 5, 10])
    ap.add_argument("--a-fp", type=int, default=40)
    ap.add_argument("--box", type=float, default=None, help="state box bound (default: none)")
    args = ap.parse_args()
    table = gs.truncation_error_check(consensus_toy(box=args.box), consensus_toy_theta(),
                                      levels=tuple(args.levels), a_fp=args.a_fp)
    print(f"{'a_tc':>5} {'sum |dX_k|':>12} {'sum |dtau_k|':>13} {'max ratio':>10}")
    for j, a in enumerate(table.levels):
        print(f"{a:5d} {table.grad_dev[j].sum():12.5f} {table.primal_dev[j].sum():13.5f} "
              f"{np.max(table.ratio[j]):10.4f}")
    s = table.summary
    print(f"ratio max {s['max_ratio']:.4f}, median {s['median_ratio']:.4f}")


if __name__ == "__main__":
    main()
