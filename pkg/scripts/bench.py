"""Time the three gradient LQR solvers on the benchmark shapes and print a table."""
import argparse

from admmddp.cli import bench_shapes


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--N", type=int, default=100)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rows = bench_shapes(args.N, args.repeats, args.seed)
    aug = {r["shape"]: r["median"] for r in rows if r["solver"] == "augmented"}
    print(f"{'shape':>6} {'solver':>10} {'median ms':>10} {'iqr ms':>8} {'vs augmented':>13}")
    for r in rows:
        gain = 100 * (1 - r["median"] / aug[r["shape"]])
        print(f"{r['shape']:>6} {r['solver']:>10} {1e3 * r['median']:10.2f} {1e3 * r['iqr']:8.2f} "
              f"{gain:12.0f}%")


if __name__ == "__main__":
    main()
