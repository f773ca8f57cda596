"""Compare the compiled kernels with the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Prints a table of best-of-``repeat`` wall times per kernel and the speed-up,
after checking both backends agree to 1e-10.
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from scorestab import _fallback

try:
    from scorestab import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    pts = rng.normal(size=(256, 2))
    y = rng.normal(size=(4096, 2))
    mu = rng.uniform(0.3, 1.0, 4096)
    s2 = 1 - mu**2
    centers = rng.normal(size=(64, 2))
    samples = rng.normal(size=(4096, 2))
    return {
        "posterior_stats": (pts, y, mu, s2),
        "posterior_weights": (pts, y, mu, s2),
        "bump_features": (y, centers, 0.8),
        "nearest_neighbours": (samples, pts),
    }


def _close(a, b):
    if isinstance(a, tuple):
        return all(_close(x, z) for x, z in zip(a, b))
    return np.allclose(np.asarray(a), np.asarray(b), rtol=1e-10, atol=1e-12)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--csv", default=None)
    args = p.parse_args(argv)
    if _kernels is None:
        print("compiled kernels are not built; nothing to compare", file=sys.stderr)
        return 1
    rows = []
    for name, argv_ in cases(np.random.default_rng(0)).items():
        fast, slow = getattr(_kernels, name), getattr(_fallback, name)
        if not _close(fast(*argv_), slow(*argv_)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        t_fast = min(timeit.repeat(lambda: fast(*argv_), number=1, repeat=args.repeat))
        t_slow = min(timeit.repeat(lambda: slow(*argv_), number=1, repeat=args.repeat))
        rows.append([name, t_fast, t_slow, t_slow / t_fast])
    print(f"{'kernel':<20}{'cython [ms]':>14}{'numpy [ms]':>14}{'speed-up':>10}")
    for name, tf, ts, sp in rows:
        print(f"{name:<20}{1e3 * tf:>14.3f}{1e3 * ts:>14.3f}{sp:>10.2f}")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["kernel", "cython_s", "numpy_s", "speedup"])
            w.writerows([[n, repr(a), repr(b), repr(c)] for n, a, b, c in rows])
    return 0


if __name__ == "__main__":
    sys.exit(main())
