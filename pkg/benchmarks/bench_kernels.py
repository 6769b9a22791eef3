"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--samples 2000] [--repeat 3]
"""
import argparse
import time

import numpy as np

from optexcite import kernels, models


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(S, rng):
    N = 5000
    for n, l in ((1, 1), (4, 2)):
        A = -np.abs(rng.normal(size=(S, n, n))) - 3 * np.eye(n)
        B = rng.normal(size=(S, n, l))
        E = rng.normal(size=(S, n))
        X0 = rng.normal(size=(S, n))
        U = rng.normal(size=(2 * N + 1, l))
        yield f"lti_rk4_batch S={S} n={n} N={N}", "lti_rk4_batch", (A, B, E, X0, U, 1e-3, 10)

    P = rng.normal(size=(336, 336)) / 40
    W = rng.normal(size=(2000, 336))
    yield "linear_recurrence n=336 N=2000", "linear_recurrence", (P, W, np.zeros(336))

    p = models.VehicleParams()
    kf, kr = p.force_scales()
    consts = np.array([p.m, p.lf, p.lr, kf, kr, p.Tf, p.Tr])
    theta = np.column_stack([rng.uniform(5000, 7000, S // 10), rng.uniform(9, 11, (S // 10, 2)),
                             rng.uniform(15, 19, S // 10), rng.uniform(0.6, 0.9, S // 10)])
    Nv = 2500
    U = 0.05 * np.sin(np.linspace(0, 20, 2 * Nv + 1))
    yield f"single_track_batch S={S // 10} N={Nv}", "single_track_batch", (theta, consts, p.v0, U, 2e-3, 5, 1.0)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'case':40s} " + " ".join(f"{k:>10s}" for k in impls) + f" {'speedup':>8s} {'max diff':>9s}")
    for label, name, call_args in cases(args.samples, np.random.default_rng(args.seed)):
        times, outs = {}, {}
        for key, mod in impls.items():
            times[key], outs[key] = _best(lambda: getattr(mod, name)(*call_args), args.repeat)
        row = f"{label:40s} " + " ".join(f"{times[k]:9.3f}s" for k in impls)
        if "cython" in impls:
            a, b = outs["python"], outs["cython"]
            a, b = (a[0], b[0]) if isinstance(a, tuple) else (a, b)
            diff = float(np.nanmax(np.abs(a - b)))
            row += f" {times['python'] / times['cython']:7.1f}x {diff:9.1e}"
        print(row)


if __name__ == "__main__":
    main()
