"""Compare the numba and numpy kernel backends on the hot loops.

Usage: python benchmarks/bench_kernels.py [--repeats 200] [--csv out.csv]
"""

import argparse
import csv
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from csmud.kernels import _nb, _np
from csmud.sysmodel import SystemConfig, make_dictionary, sample_ground_truth


def timeit(fn, repeats):
    fn()  # JIT compile / warm caches
    t = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        fn()
        t[i] = time.perf_counter() - t0
    return float(np.median(t))


def cases():
    c = SystemConfig(K=100, Ns=40, L=6, n=6, seed=0)
    D = make_dictionary(c)
    rng = np.random.default_rng(0)
    y = D.matrix @ sample_ground_truth(c.K, c.L, c.n, rng).x
    S = np.ascontiguousarray(D.matrix)
    mu = 1.0 / D.spectral_norm_sq
    z = rng.standard_normal((250, 600)).astype(np.float32)
    g = rng.standard_normal((250, 600)).astype(np.float32)
    gp = rng.standard_normal((250, 100)).astype(np.float32)
    _, mask = _np.block_activation_forward(z, 6)
    _, idx = _np.block_max_pool_forward(z, 6)
    return {
        "biht_100it": lambda m: m.iht_loop(S, D.adjoint, y, mu, 6, 6, 100, 0.0),
        "iht_100it": lambda m: m.iht_loop(S, D.adjoint, y, mu, 1, 36, 100, 0.0),
        "block_activation_fwd": lambda m: m.block_activation_forward(z, 6),
        "block_activation_bwd": lambda m: m.block_activation_backward(g, mask, 6),
        "block_max_pool_fwd": lambda m: m.block_max_pool_forward(z, 6),
        "block_max_pool_bwd": lambda m: m.block_max_pool_backward(gp, idx, 600),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=200)
    p.add_argument("--csv", help="also write the table here")
    args = p.parse_args(argv)
    rows = []
    with threadpool_limits(limits=1):
        for name, fn in cases().items():
            t_np = timeit(lambda: fn(_np), args.repeats)
            t_nb = timeit(lambda: fn(_nb), args.repeats)
            rows.append((name, t_np, t_nb, t_np / t_nb))
    print(f"{'kernel':24s} {'numpy [s]':>11s} {'numba [s]':>11s} {'speedup':>8s}")
    for name, a, b, r in rows:
        print(f"{name:24s} {a:11.3e} {b:11.3e} {r:7.2f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["kernel", "numpy_s", "numba_s", "speedup"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
