"""Compare the numba kernels with their numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel and problem size with the best-of-N wall time of
each backend and the speedup. The numba timings exclude JIT compilation.
"""

import argparse
import time

import numpy as np

from rwseg import _accel


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    for n, K in ((512, 3), (8192, 3), (65536, 4)):
        V = rng.normal(size=(n, K))
        s = rng.integers(0, K, n)
        yield (f"project_compatible_rows n={n} K={K}",
               lambda V=V, s=s: _accel.project_compatible_rows_numpy(V, s),
               (lambda V=V, s=s: _accel.project_compatible_rows_numba(V, s)) if _accel.HAVE_NUMBA else None)
    for n, K in ((512, 3), (65536, 4)):
        m = 13 * n
        e = np.sort(rng.integers(0, n, size=(m, 2)), axis=1)
        e = e[e[:, 0] != e[:, 1]]
        w = rng.random(len(e))
        Y = rng.random((K, n))
        yield (f"edge_quadform n={n} edges={len(e)} K={K}",
               lambda e=e, w=w, Y=Y: _accel.edge_quadform_numpy(e, w, Y),
               (lambda e=e, w=w, Y=Y: _accel.edge_quadform_numba(e, w, Y)) if _accel.HAVE_NUMBA else None)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"numba available: {_accel.HAVE_NUMBA}; active backend: {_accel.BACKEND}")
    for name, f_np, f_nb in cases(np.random.default_rng(0)):
        t_np = best_of(f_np, args.repeat)
        if f_nb is None:
            print(f"{name:45s} numpy {t_np * 1e3:9.3f} ms  numba      n/a")
            continue
        f_nb()  # compile
        t_nb = best_of(f_nb, args.repeat)
        print(f"{name:45s} numpy {t_np * 1e3:9.3f} ms  numba {t_nb * 1e3:9.3f} ms  x{t_np / t_nb:6.1f}")


if __name__ == "__main__":
    main()
