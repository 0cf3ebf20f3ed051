"""Throughput comparison of the trajectory-stepping backends.

Runs the stochastic Heun kernel over identical inputs on the pure-NumPy
backend and, when built, the compiled extension, asserting bit-identical
final states and printing steps/second for each chain size.

    python3 benchmarks/kernel_throughput.py --sizes 10,100 --n-steps 20000
"""

import argparse
import sys

from bosechain.cli import benchmark_kernels
from bosechain import _kernels


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="10,100",
                    help="comma list of chain lengths")
    ap.add_argument("--n-steps", type=int, default=20_000)
    ap.add_argument("--repeats", type=int, default=3,
                    help="best-of timing repeats")
    args = ap.parse_args(argv)

    if not _kernels.HAVE_COMPILED:
        print("note: compiled extension not built, timing pure backend only")
    rows = benchmark_kernels(tuple(int(x) for x in args.sizes.split(",")),
                             args.n_steps, args.repeats)
    print(f"{'backend':>10} {'L':>5} {'steps/s':>12} {'site-steps/s':>14}")
    for r in rows:
        print(f"{r['backend']:>10} {r['L']:>5} {r['steps_per_s']:>12.0f} "
              f"{r['steps_per_s'] * r['L']:>14.0f}")
    by_L = {}
    for r in rows:
        by_L.setdefault(r["L"], {})[r["backend"]] = r["steps_per_s"]
    for L, d in sorted(by_L.items()):
        if len(d) == 2:
            print(f"L={L}: compiled/pure speedup "
                  f"{d['compiled'] / d['python']:.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
