"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

Both backends are imported directly, so ``HOMSGD_PURE_PYTHON`` has no
effect here.  Each case reports the best wall time over ``--repeat``
trials and checks that the two backends agree.
"""

import argparse
import time

import numpy as np

from homsgd import _kernels_py as pure

try:
    from homsgd import _kernels as compiled
except ImportError:
    compiled = None


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def sgd_case(n, d, steps, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, d)) / np.sqrt(d)
    b = rng.standard_normal(n)
    x = rng.standard_normal(d)
    idx = rng.integers(0, n, steps).astype(np.int64)
    gam = np.full(steps, 0.5)
    return a, b, x, idx, gam


def hsgd_case(paths, d, steps, seed=0):
    rng = np.random.default_rng(seed)
    sig = np.sort(rng.uniform(0.2, 1.5, d))[::-1].copy()
    bt = rng.standard_normal(d)
    y = rng.standard_normal((paths, d))
    noise = rng.standard_normal((paths, steps, d))
    gam = np.full(steps, 0.5)
    return y, noise, gam, sig, bt, sig**2 + 0.1, sig * bt


def bench_sgd(mod, args, repeat):
    a, b, x, idx, gam = args
    out = {}

    def go():
        out["x"] = x.copy()
        mod.sgd_steps(a, b, out["x"], idx, gam, 1e-3)

    return _best(go, repeat), out


def bench_hsgd(mod, args, repeat):
    y, noise, gam, sig, bt, rate, sb = args
    out = {}

    def go():
        out["x"] = y.copy()
        mod.hsgd_steps(out["x"], noise, gam, sig, bt, rate, sb, 0.1, 1e-3, 1.0 / 500, True)

    return _best(go, repeat), out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--quick", action="store_true", help="smaller problem sizes")
    args = parser.parse_args(argv)
    if compiled is None:
        parser.error("compiled extension homsgd._kernels is not built (pip install -e . --no-build-isolation)")

    scale = 4 if args.quick else 1
    cases = [
        ("sgd n=1000 d=100", bench_sgd, sgd_case(1000, 100, 40_000 // scale)),
        ("sgd n=4000 d=1000", bench_sgd, sgd_case(4000, 1000, 20_000 // scale)),
        ("hsgd paths=8 d=400", bench_hsgd, hsgd_case(8, 400, 2000 // scale)),
        ("hsgd paths=1 d=2000", bench_hsgd, hsgd_case(1, 2000, 2000 // scale)),
    ]
    print(f"{'case':24s} {'cython [s]':>12s} {'python [s]':>12s} {'speedup':>9s}  max|diff|")
    for name, fn, inputs in cases:
        tc, oc = fn(compiled, inputs, args.repeat)
        tp, op = fn(pure, inputs, max(1, args.repeat // 2))
        diff = float(np.max(np.abs(oc["x"] - op["x"])))
        print(f"{name:24s} {tc:12.4f} {tp:12.4f} {tp / tc:8.1f}x  {diff:.2e}")


if __name__ == "__main__":
    main()
