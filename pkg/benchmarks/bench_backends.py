"""Benchmark the numba kernels against the pure-numpy fallback.

Times the four hot kernels (softmax forward, softmax VJP, exponential kernel
map, fused AdamW update) on a range of matrix sizes under both backends and
prints the speedups. Matrix products are excluded on purpose: both backends
delegate them to BLAS.

Run:  python3 benchmarks/bench_backends.py [--repeats 30]
"""

import argparse
import time

import numpy as np

from kadapters import backend


def timeit(fn, repeats):
    fn()  # warm-up (includes JIT compilation on the numba path)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_case(name, make_call, repeats):
    timings = {}
    for backend_name in backend.available_backends():
        backend.select_backend(backend_name)
        timings[backend_name] = timeit(make_call(), repeats)
    return name, timings


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    if "numba" not in backend.available_backends():
        print("numba unavailable; nothing to compare")
        return

    rng = np.random.default_rng(0)
    cases = []
    for rows, cols in ((64, 64), (256, 256), (1024, 1024)):
        x = rng.standard_normal((rows, cols))
        g = rng.standard_normal((rows, cols))
        s = backend._softmax_rows_np(x)
        m = np.zeros_like(x)
        v = np.zeros_like(x)

        cases.append(bench_case(
            f"softmax_rows      {rows}x{cols}",
            lambda x=x: (lambda: backend.softmax_rows(x)), args.repeats))
        cases.append(bench_case(
            f"softmax_rows_vjp  {rows}x{cols}",
            lambda s=s, g=g: (lambda: backend.softmax_rows_vjp(s, g)), args.repeats))
        cases.append(bench_case(
            f"exp_scaled        {rows}x{cols}",
            lambda x=x: (lambda: backend.exp_scaled(x, 0.125)), args.repeats))
        cases.append(bench_case(
            f"adamw_update      {rows}x{cols}",
            lambda x=x, g=g, m=m, v=v: (
                lambda: backend.adamw_update(x, g, m, v, 10, 1e-3, 0.9, 0.999, 1e-8, 0.01)
            ), args.repeats))

    print(f"{'kernel':<28}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for name, timings in cases:
        ratio = timings["numpy"] / timings["numba"]
        print(f"{name:<28}{timings['numpy'] * 1e6:>10.1f}us"
              f"{timings['numba'] * 1e6:>10.1f}us{ratio:>9.2f}x")


if __name__ == "__main__":
    main()
