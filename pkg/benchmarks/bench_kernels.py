#!/usr/bin/env python3
"""Time the numba kernels against their numpy fallbacks.

Each kernel runs on inputs shaped like a desk-scale and a full-scale IFEct
fit (units x years). Outputs are checked for agreement before timing.

    python3 benchmarks/bench_kernels.py [--units 1000 100000] [--json out.json]
"""

import argparse
import json
import sys
import time

import numpy as np

from causalpanel import _kernels as K

YEARS = 25
RANK = 2
WARMUP_RUNS = 2
BENCH_RUNS = 5
SEED = 42


def make_inputs(n, rng):
    Y = rng.standard_normal((n, YEARS))
    mask = rng.random((n, YEARS)) < 0.8
    LF = rng.standard_normal((n, YEARS))
    XB = rng.standard_normal((n, YEARS))
    alpha = rng.standard_normal(n)
    xi = rng.standard_normal(YEARS)
    F = rng.standard_normal((YEARS, RANK))
    return Y, mask, LF, XB, alpha, xi, F


def make_records(n, rng):
    survey = rng.choice(np.array([1997, 2002, 2007, 2012, 2017]), size=n)
    age = rng.integers(15, 86, size=n)
    start = np.maximum(np.maximum(survey - (age - 15), 1993), 0).astype(np.int64)
    status = rng.integers(0, 4, size=n)
    init = np.minimum(rng.integers(12, 26, size=n), age)
    cess = np.minimum(init + rng.integers(0, 20, size=n), age)
    hi = np.minimum(cess + rng.integers(1, 6, size=n), age)
    return start, survey.astype(np.int64), age.astype(np.int64), status.astype(np.int64), init, cess, cess, hi


def cases(n, rng):
    Y, mask, LF, XB, alpha, xi, F = make_inputs(n, rng)
    LF2, XB2 = LF + 0.01, XB - 0.01
    out = np.empty_like(Y)
    rec = make_records(n, rng)
    return {
        "em_fill": (lambda f: (f(Y, mask, LF, XB, alpha, xi, out), out.copy())[1]),
        "em_stats": (lambda f: np.array(f(Y, mask, LF, XB, alpha, xi, LF2, XB2, alpha, xi))),
        "masked_margins_diff": (lambda f: np.concatenate(f(Y, mask, LF, XB))),
        "masked_margins": (lambda f: np.concatenate(f(Y, mask))),
        "unit_loadings": (lambda f: f(Y, mask, F, RANK)[0]),
        "expand_histories": (lambda f: np.concatenate([np.asarray(a, dtype=np.float64) for a in f(*rec)])),
    }


def bench(call, warmup=WARMUP_RUNS, runs=BENCH_RUNS):
    for _ in range(warmup):
        call()
    times = []
    for _ in range(runs):
        start = time.perf_counter()
        call()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--units", type=int, nargs="+", default=[1000, 100000])
    parser.add_argument("--json", help="write results to this file")
    args = parser.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba unavailable (or disabled); nothing to compare", file=sys.stderr)
        return 1

    rng = np.random.default_rng(SEED)
    results = []
    print(f"{'kernel':<22}{'units':>9}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for n in args.units:
        for name, run in cases(n, rng).items():
            f_np = getattr(K, f"{name}_numpy")
            f_nb = getattr(K, f"{name}_numba")
            a, b = run(f_np), run(f_nb)
            if not np.allclose(a, b, rtol=1e-10, atol=1e-12, equal_nan=True):
                print(f"{name}: numba and numpy outputs disagree", file=sys.stderr)
                return 2
            t_np = bench(lambda: run(f_np))
            t_nb = bench(lambda: run(f_nb))
            results.append({"kernel": name, "units": n, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb})
            print(f"{name:<22}{n:>9}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>10.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
