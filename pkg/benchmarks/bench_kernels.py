"""Compare the compiled kernels with the numpy fallback on representative sizes.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--quick]

Prints one line per kernel and size: best-of-N wall time for each backend, the
speed-up, and the maximum absolute difference between the two results.
"""
import argparse
import sys
import timeit

import numpy as np

from pmal import _fallback

try:
    from pmal import _kernels as compiled
except ImportError:
    compiled = None


def cases(quick):
    rng = np.random.default_rng(0)
    sizes = [(500, 500, 16), (2000, 2000, 16)] if not quick else [(300, 300, 16)]
    for n, m, d in sizes:
        pts1, pts2 = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        yield f"topology_gap n={n} ref={m} d={d}", "topology_gap", (pts1, pts1[:m].copy(), pts2, pts2[:m].copy())
    for n in ([200, 1000] if not quick else [200]):
        x = rng.standard_normal((n, 8))
        dist = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
        r = rng.uniform(size=n)
        yield f"nearest_higher n={n}", "nearest_higher", (dist, r, float(dist.max()))
    for size in ([1 << 16, 1 << 20] if not quick else [1 << 14]):
        data = rng.integers(0, 256, size, dtype=np.uint8)
        yield f"fnv1a64 bytes={size}", "fnv1a64", (data,)


def best_time(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="small sizes only (smoke run)")
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled kernels are not built; only the fallback can be timed", file=sys.stderr)
    print(f"{'kernel':36s} {'python (s)':>11s} {'cython (s)':>11s} {'speed-up':>9s} {'max |diff|':>11s}")
    for label, name, inputs in cases(args.quick):
        slow = getattr(_fallback, name)
        t_py = best_time(slow, inputs, args.repeat)
        ref = slow(*inputs)
        if compiled is None:
            print(f"{label:36s} {t_py:11.5f} {'-':>11s} {'-':>9s} {'-':>11s}")
            continue
        fast = getattr(compiled, name)
        t_c = best_time(fast, inputs, args.repeat)
        got = fast(*inputs)
        if isinstance(ref, int):
            diff = 0.0 if got == ref else float("inf")
        else:
            diff = float(np.max(np.abs(got - ref)))
        print(f"{label:36s} {t_py:11.5f} {t_c:11.5f} {t_py / t_c:8.1f}x {diff:11.3g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
