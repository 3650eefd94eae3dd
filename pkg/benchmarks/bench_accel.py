"""Compare the numba kernels with their numpy fallbacks.

Run with ``python3 benchmarks/bench_accel.py``. The kernels are called
directly, so the ``ORDGEE_NUMBA`` flag does not matter here; the last
section times a full fit under both settings in fresh interpreters.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ordgee import _accel
from ordgee.association import odds_ratio_seed


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_ipfp(B, J, repeat):
    rng = np.random.default_rng(0)
    row = rng.dirichlet(np.ones(J), size=B)
    col = rng.dirichlet(np.ones(J), size=B)
    seed = odds_ratio_seed(np.exp(rng.normal(0, 0.8, size=(B, J - 1, J - 1))))
    seed = seed * row[:, :, None] * col[:, None, :]
    _accel._ipfp_loop(seed, row, col, 1e-10, 10_000)  # compile
    fast = _best(lambda: _accel._ipfp_loop(seed, row, col, 1e-10, 10_000), repeat)
    slow = _best(lambda: _accel._ipfp_numpy(seed, row, col, 1e-10, 10_000), repeat)
    return fast, slow


def bench_score(n, K, p, repeat):
    rng = np.random.default_rng(1)
    D = rng.normal(size=(n, K, p))
    W = rng.normal(size=(n, K, K))
    r = rng.normal(size=(n, K))
    _accel._score_info_loop(D, W, r)
    fast = _best(lambda: _accel._score_info_loop(D, W, r), repeat)
    slow = _best(lambda: _accel._score_info_numpy(D, W, r), repeat)
    return fast, slow


FIT_SNIPPET = """
import time, numpy as np
from ordgee.simulation import Scenario, generate_panel
from ordgee.estimators import solve_gee
p = generate_panel(Scenario(n={n}), np.random.default_rng(3))
solve_gee(p, 'lor:uniform')
t = time.perf_counter()
for _ in range({repeat}):
    solve_gee(p, 'lor:uniform')
print((time.perf_counter() - t) / {repeat})
"""


def bench_fit(n, repeat):
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, ORDGEE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", FIT_SNIPPET.format(n=n, repeat=repeat)],
                             env=env, capture_output=True, text=True, check=True)
        out[flag] = float(res.stdout.strip())
    return out["1"], out["0"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=300, help="subjects in the full-fit benchmark")
    args = ap.parse_args()
    if not _accel.NUMBA_AVAILABLE:
        sys.exit("numba is not installed")
    rows = [
        ("ipfp B=3000 J=3", bench_ipfp(3000, 3, args.repeat)),
        ("ipfp B=3000 J=5", bench_ipfp(3000, 5, args.repeat)),
        ("score n=300 K=6 p=7", bench_score(300, 6, 7, args.repeat)),
        ("score n=2000 K=12 p=9", bench_score(2000, 12, 9, args.repeat)),
        (f"fit lor:uniform n={args.n}", bench_fit(args.n, args.repeat)),
    ]
    print(f"{'case':<26}{'numba (ms)':>12}{'numpy (ms)':>12}{'speedup':>10}")
    for name, (fast, slow) in rows:
        print(f"{name:<26}{1e3 * fast:>12.2f}{1e3 * slow:>12.2f}{slow / fast:>10.1f}")


if __name__ == "__main__":
    main()
