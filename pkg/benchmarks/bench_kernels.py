"""Time the compiled kernels against the NumPy fallback.

Both backends are imported directly (the env-var switch in
domainforge.kernels picks one per process; this script wants both), their
outputs are checked bit-identical on every benchmarked input, and a small
table of best-of-N timings is printed.

Usage: python benchmarks/bench_kernels.py [--repeats 7]
"""
import argparse
import time

import numpy as np

from domainforge.kernels import _fallback

try:
    from domainforge.kernels import _ext
except ImportError:
    _ext = None

MINHASH_CASES = (
    # (n shingle hashes, k signature components)
    (200, 64),
    (200, 256),
    (5_000, 256),
    (50_000, 256),
)

SIGNED_CASES = (
    # (n token hashes, dims)
    (100, 256),
    (2_000, 256),
    (50_000, 1_024),
)


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def run(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for n, k in MINHASH_CASES:
        hashes = rng.integers(0, 2**64, size=n, dtype=np.uint64)
        keys = rng.integers(0, 2**64, size=k, dtype=np.uint64)
        slow = best_of(lambda: _fallback.minhash_mix(hashes, keys), repeats)
        if _ext is not None:
            assert np.array_equal(_ext.minhash_mix(hashes, keys),
                                  _fallback.minhash_mix(hashes, keys))
            fast = best_of(lambda: _ext.minhash_mix(hashes, keys), repeats)
        else:
            fast = None
        rows.append((f"minhash_mix n={n} k={k}", slow, fast))
    for n, dims in SIGNED_CASES:
        hashes = rng.integers(0, 2**64, size=n, dtype=np.uint64)
        slow = best_of(lambda: _fallback.signed_counts(hashes, dims),
                       repeats)
        if _ext is not None:
            assert np.array_equal(_ext.signed_counts(hashes, dims),
                                  _fallback.signed_counts(hashes, dims))
            fast = best_of(lambda: _ext.signed_counts(hashes, dims),
                           repeats)
        else:
            fast = None
        rows.append((f"signed_counts n={n} dims={dims}", slow, fast))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--repeats", type=int, default=7,
                        help="take the best of this many timed calls")
    args = parser.parse_args()

    if _ext is None:
        print("compiled extension not available; timing the fallback only")
    rows = run(args.repeats)

    width = max(len(r[0]) for r in rows)
    print(f"{'case':<{width}}  {'fallback':>10}  {'ext':>10}  {'speedup':>8}")
    for name, slow, fast in rows:
        if fast is None:
            print(f"{name:<{width}}  {slow * 1e3:>8.3f}ms  {'-':>10}  "
                  f"{'-':>8}")
        else:
            print(f"{name:<{width}}  {slow * 1e3:>8.3f}ms  "
                  f"{fast * 1e3:>8.3f}ms  {slow / fast:>7.1f}x")


if __name__ == "__main__":
    main()
