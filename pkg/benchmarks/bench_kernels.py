"""Benchmark the numba kernels against the pure-numpy fallback.

Run with `python3 benchmarks/bench_kernels.py`.  Both implementations are
imported directly, so the comparison is independent of SPLITDP_NO_JIT; the
script also verifies that their outputs stay bit-identical.

Typical output (single CPU, numba threads=1): the jitted binomial sampler
is a few times faster than the vectorized numpy walk at large u because the
scalar walk terminates early, while pack/unpack are close since numpy's
packbits is already compiled.
"""

import argparse
import time

import numpy as np

from splitdp._kernels import (
    _HAVE_NUMBA,
    _binomial_levels_numpy,
    _pack_levels_numpy,
    _unpack_levels_numpy,
)

if _HAVE_NUMBA:
    from splitdp._kernels import (
        _binomial_levels_numba,
        _pack_levels_numba,
        _unpack_levels_numba,
    )


def timeit(fn, *args, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - start)
    return best, out


def bench_binomial(size, seed):
    gen = np.random.default_rng(seed)
    print(f"\nbinomial_levels, {size:,} draws")
    print(f"{'u':>4} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for n in (1, 2, 4, 8):
        u = 2**n - 1
        p = gen.uniform(0.2, 0.8, size)
        unif = gen.random(size)
        t_np, out_np = timeit(_binomial_levels_numpy, p, unif, u)
        if _HAVE_NUMBA:
            t_nb, out_nb = timeit(_binomial_levels_numba, p, unif, u)
            assert np.array_equal(out_np, out_nb), "backends disagree"
            print(f"{u:>4} {t_np:>9.4f}s {t_nb:>9.4f}s {t_np / t_nb:>7.2f}x")
        else:
            print(f"{u:>4} {t_np:>9.4f}s {'-':>10} {'-':>8}")


def bench_pack(size, seed):
    gen = np.random.default_rng(seed)
    print(f"\npack_levels / unpack_levels, {size:,} levels")
    print(f"{'n':>4} {'op':>8} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for n in (1, 4, 8):
        levels = gen.integers(0, 2**n, size)
        t_np, packed = timeit(_pack_levels_numpy, levels, n)
        if _HAVE_NUMBA:
            t_nb, packed_nb = timeit(_pack_levels_numba, levels, n)
            assert np.array_equal(packed, packed_nb)
            print(f"{n:>4} {'pack':>8} {t_np:>9.4f}s {t_nb:>9.4f}s {t_np / t_nb:>7.2f}x")
        else:
            print(f"{n:>4} {'pack':>8} {t_np:>9.4f}s {'-':>10} {'-':>8}")
        t_np, out = timeit(_unpack_levels_numpy, packed, size, n)
        assert np.array_equal(out, levels)
        if _HAVE_NUMBA:
            t_nb, out_nb = timeit(_unpack_levels_numba, packed, size, n)
            assert np.array_equal(out_nb, levels)
            print(f"{n:>4} {'unpack':>8} {t_np:>9.4f}s {t_nb:>9.4f}s {t_np / t_nb:>7.2f}x")
        else:
            print(f"{n:>4} {'unpack':>8} {t_np:>9.4f}s {'-':>10} {'-':>8}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=2_000_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(f"numba available: {_HAVE_NUMBA}")
    if _HAVE_NUMBA:
        # warm up the jit so compile time is excluded
        _binomial_levels_numba(np.array([0.3]), np.array([0.5]), 3)
        _pack_levels_numba(np.array([1, 0, 1]), 1)
        _unpack_levels_numba(np.array([5], dtype=np.uint8), 3, 1)
    bench_binomial(args.size, args.seed)
    bench_pack(args.size, args.seed)


if __name__ == "__main__":
    main()
