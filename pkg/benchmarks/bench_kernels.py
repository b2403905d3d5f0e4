"""Compare the compiled kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Times ``linalg.svd`` and ``linalg.matmul`` at a few sizes with each kernel
module swapped in, and checks that both give the same singular values.
"""
import argparse
import timeit

import numpy as np

from salora import _fallback, linalg

try:
    from salora import _kernels
except ImportError:
    _kernels = None


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench(repeat=5):
    impls = {"python": _fallback}
    if _kernels is not None:
        impls["compiled"] = _kernels
    rng = np.random.default_rng(0)
    rows = []
    for n in (8, 32, 64):
        m = rng.standard_normal((n, n))
        timings, values = {}, {}
        for name, mod in impls.items():
            linalg.kernels = mod
            timings[name] = _time(lambda: linalg.svd(m), repeat)
            values[name] = linalg.svd(m).s
        diff = max(np.abs(v - values["python"]).max() for v in values.values())
        rows.append(("svd", f"{n}x{n}", timings, diff))
    for n in (16, 64, 128):
        a, b = rng.standard_normal((n, n)), rng.standard_normal((n, n))
        timings = {}
        for name, mod in impls.items():
            linalg.kernels = mod
            timings[name] = _time(lambda: linalg.matmul(a, b), repeat)
        rows.append(("matmul", f"{n}x{n}", timings, None))
    linalg.kernels = impls.get("compiled", _fallback)
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    print(f"{'op':<8}{'size':>9}{'python (ms)':>14}{'compiled (ms)':>16}{'speedup':>10}{'max |ds|':>11}")
    for op, size, t, diff in bench(args.repeat):
        py = t["python"] * 1e3
        comp = t.get("compiled")
        comp_s = f"{comp * 1e3:>16.3f}" if comp is not None else f"{'n/a':>16}"
        speed = f"{t['python'] / comp:>9.1f}x" if comp else f"{'':>10}"
        diff_s = f"{diff:>11.1e}" if diff is not None else f"{'':>11}"
        print(f"{op:<8}{size:>9}{py:>14.3f}{comp_s}{speed}{diff_s}")


if __name__ == "__main__":
    main()
