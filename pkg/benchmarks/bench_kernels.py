"""Time the ranking kernel: numba path vs the pure-numpy fallback.

    python benchmarks/bench_kernels.py --queries 500 --gallery 2000
"""

import argparse
import time

import numpy as np

from sci_reid import _kernels


def problem(nq, ng, seed=0):
    rng = np.random.default_rng(seed)
    dist = rng.random((nq, ng))
    junk = rng.random((nq, ng)) < 0.05
    pos = (rng.random((nq, ng)) < 0.02) & ~junk
    return dist, junk, pos


def best_of(fn, args, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--queries", type=int, default=500)
    ap.add_argument("--gallery", type=int, default=2000)
    ap.add_argument("--kmax", type=int, default=10)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    data = problem(args.queries, args.gallery) + (args.kmax,)
    t_np, ref = best_of(_kernels.rank_metrics_numpy, data, args.repeats)
    print(f"numpy : {t_np * 1e3:8.2f} ms")
    if not _kernels.HAVE_NUMBA:
        print("numba : unavailable (not installed or SCI_DISABLE_NUMBA set)")
        return
    _kernels.rank_metrics(*problem(2, 8), args.kmax)  # compile outside the timed region
    t_nb, out = best_of(_kernels.rank_metrics, data, args.repeats)
    same = all(a.tobytes() == b.tobytes() for a, b in zip(out, ref))
    print(f"numba : {t_nb * 1e3:8.2f} ms  speedup x{t_np / t_nb:.1f}  bit-identical={same}")


if __name__ == "__main__":
    main()
