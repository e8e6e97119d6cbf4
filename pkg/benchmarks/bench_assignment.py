"""Time the compiled and pure-Python assignment kernels on random EMD-sized problems.

Usage: python3 benchmarks/bench_assignment.py [--sizes 40,80,160] [--repeat 3]
"""

import argparse
import time

import numpy as np

from featcraft import _assign_py

try:
    from featcraft import _assign
except ImportError:
    _assign = None


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="40,80,160,320")
    ap.add_argument("--dim", type=int, default=256, help="point dimension (pixels)")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'n':>5} {'python [s]':>11} {'cython [s]':>11} {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        a, b = rng.uniform(size=(n, args.dim)), rng.uniform(size=(n, args.dim))
        cost = _assign_py.pairwise_euclidean(a, b)
        t_py = best_time(lambda: _assign_py.solve(cost), args.repeat)
        if _assign is None:
            print(f"{n:5d} {t_py:11.4f} {'n/a':>11} {'':>8}")
            continue
        t_c = best_time(lambda: _assign.solve(cost), args.repeat)
        same = np.array_equal(_assign_py.solve(cost), _assign.solve(cost))
        print(f"{n:5d} {t_py:11.4f} {t_c:11.4f} {t_py / t_c:7.1f}x{'' if same else '  (assignments differ)'}")


if __name__ == "__main__":
    main()
