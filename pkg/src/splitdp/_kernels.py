"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

The numba path is the default; setting the environment variable
``SPLITDP_NO_JIT=1`` before import selects the pure-numpy fallback.  Both
implementations perform the same floating-point operations in the same
order, so their outputs are bit-identical.

The binomial sampler is an exact inverse-CDF walk: pmf terms are updated
incrementally from the previous term and accumulated with Kahan
compensation, so a single uniform draw maps to an exactly
Binomial-distributed integer.  When p > 1/2 the complementary walk is used
(K = u - K', K' ~ Binomial(u, 1-p)) to keep the starting term (1-p)^u away
from underflow for u up to 255.
"""

import os

import numpy as np

NO_JIT = os.environ.get("SPLITDP_NO_JIT", "0") == "1"

_HAVE_NUMBA = False
if not NO_JIT:
    try:
        from numba import njit, prange

        _HAVE_NUMBA = True
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def _binomial_levels_numpy(p, unif, u):
    """Vectorized inverse-CDF walk, arithmetic identical to the scalar walk."""
    p = np.asarray(p, dtype=np.float64)
    unif = np.asarray(unif, dtype=np.float64)
    flip = p > 0.5
    q = np.where(flip, 1.0 - p, p)
    done0 = q <= 0.0
    k = np.zeros(p.shape, dtype=np.int64)

    t = (1.0 - q) ** float(u)
    cum = t.copy()
    comp = np.zeros_like(cum)
    ratio = q / (1.0 - q)
    for j in range(u):
        k += (unif > cum) & ~done0
        t = t * ((u - j) / (j + 1.0)) * ratio
        # Kahan step, same operation order as the scalar kernel
        y = t - comp
        s = cum + y
        comp = (s - cum) - y
        cum = s
    k[done0] = 0
    return np.where(flip, u - k, k)


def _pack_levels_numpy(levels, n):
    """Bit-pack level indices, n bits each, LSB-first within each byte."""
    levels = np.asarray(levels, dtype=np.uint8).ravel()
    bits = ((levels[:, None] >> np.arange(n, dtype=np.uint8)) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little")


def _unpack_levels_numpy(data, count, n):
    bits = np.unpackbits(np.asarray(data, dtype=np.uint8), bitorder="little")
    bits = bits[: count * n].reshape(count, n).astype(np.int64)
    return bits @ (1 << np.arange(n, dtype=np.int64))


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _binom_one(p, unif, u):
        flip = p > 0.5
        q = 1.0 - p if flip else p
        if q <= 0.0:
            k = 0
        else:
            # float exponent keeps pow rounding identical to the numpy path
            t = (1.0 - q) ** np.float64(u)
            cum = t
            comp = 0.0
            ratio = q / (1.0 - q)
            k = 0
            while unif > cum and k < u:
                t = t * ((u - k) / (k + 1.0)) * ratio
                k += 1
                y = t - comp
                s = cum + y
                comp = (s - cum) - y
                cum = s
        return u - k if flip else k

    @njit(cache=True, parallel=True)
    def _binomial_levels_flat(p, unif, u):
        out = np.empty(p.shape[0], dtype=np.int64)
        for i in prange(p.shape[0]):
            out[i] = _binom_one(p[i], unif[i], u)
        return out

    def _binomial_levels_numba(p, unif, u):
        p = np.ascontiguousarray(p, dtype=np.float64)
        unif = np.ascontiguousarray(unif, dtype=np.float64)
        return _binomial_levels_flat(p.ravel(), unif.ravel(), u).reshape(p.shape)

    @njit(cache=True)
    def _pack_levels_flat(levels, n):
        count = levels.shape[0]
        nbytes = (count * n + 7) // 8
        out = np.zeros(nbytes, dtype=np.uint8)
        pos = 0
        for i in range(count):
            lv = levels[i]
            for b in range(n):
                if (lv >> b) & 1:
                    out[pos >> 3] |= np.uint8(1 << (pos & 7))
                pos += 1
        return out

    def _pack_levels_numba(levels, n):
        flat = np.ascontiguousarray(levels, dtype=np.int64).ravel()
        return _pack_levels_flat(flat, n)

    @njit(cache=True)
    def _unpack_levels_flat(data, count, n):
        out = np.empty(count, dtype=np.int64)
        pos = 0
        for i in range(count):
            lv = 0
            for b in range(n):
                if (data[pos >> 3] >> (pos & 7)) & 1:
                    lv |= 1 << b
                pos += 1
            out[i] = lv
        return out

    def _unpack_levels_numba(data, count, n):
        return _unpack_levels_flat(np.ascontiguousarray(data, dtype=np.uint8), count, n)


if _HAVE_NUMBA:
    binomial_levels = _binomial_levels_numba
    pack_levels = _pack_levels_numba
    unpack_levels = _unpack_levels_numba
    BACKEND = "numba"
else:
    binomial_levels = _binomial_levels_numpy
    pack_levels = _pack_levels_numpy
    unpack_levels = _unpack_levels_numpy
    BACKEND = "numpy"
