"""Time the assignment backends (compiled, pure Python, scipy) on random costs.

    python3 benchmarks/bench_lap.py --sizes 50 100 200 --repeats 3
"""
import argparse
import time

import numpy as np
from scipy.optimize import linear_sum_assignment as scipy_lsa

from cspipe import lap


def best_time(fn, cost, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(cost)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[50, 100, 200, 400])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--python-max", type=int, default=200,
                    help="skip the pure-Python backend above this size")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    backends = {"scipy": scipy_lsa, "python": lambda c: lap.linear_sum_assignment(c, "python")}
    if lap.BACKEND == "compiled":
        backends["compiled"] = lambda c: lap.linear_sum_assignment(c, "compiled")
    print(f"{'n':>6} " + " ".join(f"{b:>12}" for b in backends) + "   (seconds, best of repeats)")
    for n in args.sizes:
        cost = rng.random((n, int(n * 1.2)))
        ref = None
        row = []
        for name, fn in backends.items():
            if name == "python" and n > args.python_max:
                row.append(f"{'-':>12}")
                continue
            t, (r, c) = best_time(fn, cost, args.repeats)
            total = cost[r, c].sum()
            if ref is None:
                ref = total
            elif not np.isclose(total, ref):
                raise SystemExit(f"{name} disagrees at n={n}: {total} vs {ref}")
            row.append(f"{t:12.5f}")
        print(f"{n:>6} " + " ".join(row))


if __name__ == "__main__":
    main()
