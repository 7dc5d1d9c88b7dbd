"""Compare the jit-compiled likelihood kernels against the pure-numpy twins.

Run:  python3 benchmarks/bench_kernels.py [--pairs K] [--repeat R]

Times one profiled-likelihood evaluation and one full variance-parameter
fit on the same synthetic dataset through both implementations, and checks
they agree bit for bit. The env flag PAIRCLUST_NO_NUMBA=1 switches the
package itself to the numpy path; this script always times both.
"""

import argparse
import time

import numpy as np

from pairclust import DgpConfig, generate_experiment
from pairclust.estimators import _moment_starts, _pair_stats
from pairclust.kernels import (
    NUMBA_ENABLED,
    lmm_fit,
    lmm_fit_python,
    lmm_profile_nll,
    lmm_profile_nll_python,
)


def _best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--pairs", type=int, default=10)
    parser.add_argument("--mean-size", type=float, default=15.0)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    cfg = DgpConfig(n_pairs=args.pairs, mean_cluster_size=args.mean_size, seed=42)
    data, _ = generate_experiment(cfg)
    ybar, nvec, tvec, M, sstot, dfw, lognsum = _pair_stats(data, None)
    starts = _moment_starts(ybar, nvec, tvec, sstot, dfw)
    theta = starts[0]
    fit_args = (ybar, nvec, tvec, M, sstot, dfw, lognsum, starts, 1e-8, 2000.0)

    if not NUMBA_ENABLED:
        print("note: numba unavailable or disabled; 'jit' rows run the numpy path")

    # first call pays any compile/cache-load cost; report it separately
    t0 = time.perf_counter()
    lmm_profile_nll(theta, ybar, nvec, tvec, M, sstot, dfw, lognsum)
    lmm_fit(*fit_args)
    warmup = time.perf_counter() - t0

    nll_jit = _best_of(
        lambda: lmm_profile_nll(theta, ybar, nvec, tvec, M, sstot, dfw, lognsum),
        args.repeat * 50,
    )
    nll_py = _best_of(
        lambda: lmm_profile_nll_python(theta, ybar, nvec, tvec, M, sstot, dfw, lognsum),
        args.repeat * 50,
    )
    fit_jit = _best_of(lambda: lmm_fit(*fit_args), args.repeat)
    fit_py = _best_of(lambda: lmm_fit_python(*fit_args), args.repeat)

    a = lmm_fit(*fit_args)
    b = lmm_fit_python(*fit_args)
    assert np.array_equal(np.asarray(a[0]), np.asarray(b[0])), "fit results diverge"
    assert a[1] == b[1], "objective values diverge"

    print(f"dataset: {args.pairs} pairs, mean size {args.mean_size}")
    print(f"warmup (compile/cache load): {warmup:8.3f} s")
    print(f"{'operation':22s} {'jit':>12s} {'numpy':>12s} {'speedup':>9s}")
    print(f"{'profile nll (1 eval)':22s} {nll_jit*1e6:10.1f} us {nll_py*1e6:10.1f} us {nll_py/nll_jit:8.1f}x")
    print(f"{'full fit (3 starts)':22s} {fit_jit*1e3:10.2f} ms {fit_py*1e3:10.2f} ms {fit_py/fit_jit:8.1f}x")
    print("bit agreement: exact")


if __name__ == "__main__":
    main()
