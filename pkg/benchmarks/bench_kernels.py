"""Benchmark the compiled kernels against the NumPy fallback.

Run:  python benchmarks/bench_kernels.py [--paths 200000] [--repeat 5]

The same inputs go through both backends; timings are best-of-repeat and
the outputs are cross-checked so the comparison is honest.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from markovflow.kernels import backends


def _best_of(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(paths: int, repeat: int) -> None:
    impls = backends()
    if "compiled" not in impls:
        print("compiled extension not available; benchmarking NumPy only")

    rng = np.random.Generator(np.random.Philox(12345))
    n = 500

    # tridiagonal solve
    lower = -rng.random(n - 1)
    upper = -rng.random(n - 1)
    diag = 2.0 + rng.random(n)
    rhs = rng.standard_normal(n)

    # Fokker-Planck march: 500 nodes, 100 steps, OU drift
    x = np.linspace(-14.0, 14.0, n)
    h = x[1] - x[0]
    mu = np.clip(-x, -50, 50)
    p0 = np.exp(-0.5 * x**2)
    p0 /= np.trapezoid(p0, x)

    # Euler paths: 32 steps
    steps = 32
    x0 = rng.standard_normal(paths) * 0.3
    normals = rng.standard_normal((steps, paths))

    rows = []
    outputs: dict[str, dict[str, np.ndarray]] = {}
    for name, impl in impls.items():
        out: dict[str, np.ndarray] = {}
        t_tri = _best_of(lambda: impl.thomas_solve(lower, diag, upper, rhs), repeat * 20)
        out["tri"] = impl.thomas_solve(lower, diag, upper, rhs)
        t_fp = _best_of(lambda: impl.fp_propagate(p0, mu, h, 0.01, 100, 1.0), repeat)
        out["fp"] = impl.fp_propagate(p0, mu, h, 0.01, 100, 1.0)[0]
        t_mc = _best_of(
            lambda: impl.euler_paths(x0.copy(), normals, mu, x[0], h, 1e-3), repeat
        )
        out["mc"] = impl.euler_paths(x0.copy(), normals, mu, x[0], h, 1e-3)
        rows.append((name, t_tri, t_fp, t_mc))
        outputs[name] = out

    if len(outputs) == 2:
        a, b = outputs["numpy"], outputs["compiled"]
        for key in a:
            err = np.max(np.abs(a[key] - b[key]))
            assert err < 1e-10, f"backend mismatch on {key}: {err}"
        print("cross-check: backends agree within 1e-10\n")

    print(f"{'backend':<10} {'thomas(500)':>14} {'fp 100x500':>14} "
          f"{'euler {:.0e}x32'.format(paths):>16}")
    for name, t_tri, t_fp, t_mc in rows:
        print(f"{name:<10} {t_tri*1e6:>11.1f} us {t_fp*1e3:>11.2f} ms {t_mc*1e3:>13.2f} ms")
    if len(rows) == 2:
        base = {r[0]: r for r in rows}
        nn, cc = base["numpy"], base["compiled"]
        print(f"\nspeedup: thomas {nn[1]/cc[1]:.1f}x, fp {nn[2]/cc[2]:.1f}x, "
              f"euler {nn[3]/cc[3]:.1f}x")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    bench(args.paths, args.repeat)
