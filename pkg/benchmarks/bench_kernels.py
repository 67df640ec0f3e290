"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--sizes 13,30,60] [--repeat 5]

The run also reports the largest difference between the two backends.
"""
import argparse
import timeit

import numpy as np

from gridest import _pykernels
from gridest.structvec import Mode, Parametrization, regressor_pattern

try:
    from gridest import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(n, rng):
    v = 1 + 0.05 * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    y = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    y = np.ascontiguousarray(y + y.T)
    for mode in Mode:
        pat = regressor_pattern(Parametrization(mode, n))
        w = np.ascontiguousarray(rng.standard_normal((n, pat.dim)) + 1j * rng.standard_normal((n, pat.dim)))
        yield f"regressor/{mode.value}", lambda m, pat=pat: m.regressor(
            v, pat.rows, pat.cols, pat.params, pat.coefs, pat.n, pat.dim)
        yield f"regressor_adjoint/{mode.value}", lambda m, pat=pat, w=w: m.regressor_adjoint(
            w, pat.rows, pat.cols, pat.params, pat.coefs, pat.n)
    yield "injection_jacobian", lambda m: m.injection_jacobian(y, v)


def best_time(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="13,30,60")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28} {'n':>4} {'python [us]':>12} {'cython [us]':>12} {'speed-up':>9} {'max diff':>9}")
    for n in (int(s) for s in args.sizes.split(",")):
        for name, call in cases(n, rng):
            pairs = zip(_as_tuple(call(_pykernels)), _as_tuple(call(_ckernels)))
            diff = max(np.max(np.abs(a - b)) for a, b in pairs)
            t_py = best_time(lambda: call(_pykernels), args.repeat)
            t_c = best_time(lambda: call(_ckernels), args.repeat)
            print(f"{name:<28} {n:4d} {1e6 * t_py:12.1f} {1e6 * t_c:12.1f} {t_py / t_c:9.1f} {diff:9.1e}")
    return 0


def _as_tuple(x):
    return x if isinstance(x, tuple) else (np.asarray(x),)


if __name__ == "__main__":
    raise SystemExit(main())
