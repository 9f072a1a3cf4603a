"""Privacy mechanisms: stochastic n-bit quantization, Gaussian, and the
Gaussian+unbiased-stochastic-rounding baseline.

Each bounded coordinate v in [-c, c] is mapped to one of 2^n uniform levels
in [-A, A] by drawing K ~ Binomial(2^n - 1, (A + v) / (2A)) and emitting
level K.  Dequantization (2K - (2^n - 1)) * A / (2^n - 1) is an unbiased
estimate of v with per-coordinate variance (A^2 - v^2) / (2^n - 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import (
    InvalidParameterError,
    InvalidInputError,
    PreconditionError,
    LatentBatch,
    RngHandle,
    clip_l2,
)

VARIANTS = ("stochastic-quant", "gaussian", "gaussian-qsgd")


class CorruptPayloadError(InvalidInputError):
    """Serialized levels are outside the valid range or fail integrity checks."""


@dataclass(frozen=True)
class MechanismParams:
    c: float
    A: float
    n: int
    d: int
    variant: str = "stochastic-quant"
    sigma: float | None = None
    C: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidParameterError(f"unknown variant {self.variant!r}")
        if not self.c > 0:
            raise InvalidParameterError("c must be positive")
        if self.A < self.c:
            raise InvalidParameterError("scale A must satisfy A >= c")
        if not 1 <= self.n <= 8:
            raise InvalidParameterError("bit-width n must be in 1..8")
        if self.d < 1:
            raise InvalidParameterError("latent dimension d must be >= 1")
        if self.variant.startswith("gaussian"):
            if self.sigma is None or self.sigma <= 0:
                raise InvalidParameterError("gaussian variants need sigma > 0")
            if self.C is None or self.C <= 0:
                raise InvalidParameterError("gaussian variants need C > 0")

    @property
    def u(self) -> int:
        return 2**self.n - 1


@dataclass
class QuantizedBatch:
    """T x d level indices, each in [0, 2^n - 1]."""

    levels: np.ndarray
    n: int
    A: float
    c: float

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.int64)
        if self.levels.ndim != 2:
            raise InvalidInputError("levels must be 2-D (T x d)")
        if self.levels.size and (self.levels.min() < 0 or self.levels.max() >= 2**self.n):
            raise CorruptPayloadError("level index out of range for bit-width")

    @property
    def T(self) -> int:
        return self.levels.shape[0]

    @property
    def d(self) -> int:
        return self.levels.shape[1]


def _as_batch(v) -> LatentBatch:
    if isinstance(v, LatentBatch):
        return v
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return LatentBatch(arr)


def stochastic_quantize(v, p: MechanismParams, rng: RngHandle) -> QuantizedBatch:
    """Quantize each coordinate via a binomial draw over 2^n levels.

    Draw order is token-major, coordinate-minor.  Coordinates outside
    [-c, c] are rejected here; the pipeline clamps before calling.
    """
    if p.variant != "stochastic-quant":
        raise InvalidParameterError("params variant must be stochastic-quant")
    batch = _as_batch(v)
    if np.any(np.abs(batch.values) > p.c):
        raise PreconditionError("latent coordinate outside [-c, c]")
    probs = (p.A + batch.values) / (2.0 * p.A)
    unif = rng.generator().random(batch.values.shape)
    levels = _kernels.binomial_levels(probs, unif, p.u)
    return QuantizedBatch(levels=levels, n=p.n, A=p.A, c=p.c)


def dequantize(q: QuantizedBatch) -> LatentBatch:
    """Affine map of levels back to values in [-A, A]."""
    u = 2**q.n - 1
    if q.levels.size and (q.levels.min() < 0 or q.levels.max() > u):
        raise CorruptPayloadError("level index exceeds 2^n - 1")
    return LatentBatch((2.0 * q.levels - u) * q.A / u)


def mechanism_variance(v, p: MechanismParams) -> float:
    """Total variance (d*A^2 - ||v||^2) / (2^n - 1) of the quantizer at v."""
    vec = np.asarray(v, dtype=np.float64).ravel()
    if np.any(np.abs(vec) > p.c):
        raise PreconditionError("v outside [-c, c]^d")
    return float((vec.size * p.A**2 - np.sum(vec**2)) / p.u)


def _clip_rows(x: np.ndarray, C: float) -> np.ndarray:
    if x.ndim == 1:
        return clip_l2(x, C)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    scale = np.where(norms > C, C / np.where(norms == 0, 1.0, norms), 1.0)
    return x * scale


def gaussian_mechanism(x, p: MechanismParams, rng: RngHandle) -> np.ndarray:
    """l2-clip each vector to radius C, then add iid N(0, sigma^2) noise."""
    if p.variant != "gaussian":
        raise InvalidParameterError("params variant must be gaussian")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("gaussian mechanism input must be finite")
    clipped = _clip_rows(x, p.C)
    noise = rng.generator().standard_normal(x.shape) * p.sigma
    return clipped + noise


def gaussian_then_qsgd(x, p: MechanismParams, rng: RngHandle) -> QuantizedBatch:
    """Gaussian mechanism followed by unbiased stochastic rounding.

    The noisy output is clamped to [-A, A] and rounded to one of the two
    neighbouring levels of the 2^n uniform grid, rounding up with
    probability equal to the fractional position between them.
    """
    if p.variant != "gaussian-qsgd":
        raise InvalidParameterError("params variant must be gaussian-qsgd")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    gen = rng.generator()
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("qsgd input must be finite")
    clipped = _clip_rows(x, p.C)
    noisy = clipped + gen.standard_normal(x.shape) * p.sigma
    y = np.clip(noisy, -p.A, p.A)
    u = p.u
    pos = (y + p.A) * u / (2.0 * p.A)  # in [0, u]
    base = np.floor(pos)
    frac = pos - base
    up = gen.random(x.shape) < frac
    levels = (base + up).astype(np.int64)
    np.clip(levels, 0, u, out=levels)
    return QuantizedBatch(levels=levels, n=p.n, A=p.A, c=p.c)
