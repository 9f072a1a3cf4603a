"""f-DP accounting: Gaussian trade-off curves, the exact two-piece
trade-off of the stochastic binary mechanism, closed-form mu/gamma bounds,
and an exact composition oracle built from Neyman-Pearson threshold tests
on binomial counts.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import binom

from .core import InvalidInputError, InvalidParameterError, TractabilityError
from .mech import MechanismParams

MAX_COMPOSITIONS = 4096
DEFAULT_GRID_POINTS = 1001


def default_alpha_grid() -> np.ndarray:
    return np.linspace(0.0, 1.0, DEFAULT_GRID_POINTS)


@dataclass(frozen=True)
class TradeoffCurve:
    """Piecewise-linear convex non-increasing map alpha -> beta on [0, 1].

    Stored breakpoints are exact nodes; the curve is linear between them.
    """

    alphas: np.ndarray
    betas: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        b = np.asarray(self.betas, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 1 or a.size < 2:
            raise InvalidInputError("curve needs matching 1-D alpha/beta arrays")
        if a[0] != 0.0 or a[-1] != 1.0 or np.any(np.diff(a) <= 0):
            raise InvalidInputError("alphas must increase strictly from 0 to 1")
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "betas", b)

    def beta(self, alpha) -> np.ndarray:
        return np.interp(alpha, self.alphas, self.betas)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("alpha,beta\n")
            for a, b in zip(self.alphas, self.betas):
                fh.write(f"{a:.17g},{b:.17g}\n")


@dataclass(frozen=True)
class GdpBound:
    mu: float
    gamma: float

    @property
    def usable(self) -> bool:
        return self.gamma < 0.5


@dataclass(frozen=True)
class TradeoffStats:
    kl: float
    kappa2: float
    kappa3: float
    kappa3bar: float


def gdp_mu_curve_value(mu: float, alpha) -> np.ndarray:
    """G_mu(alpha) = Phi(Phi^{-1}(1 - alpha) - mu), extended past [0, 1]."""
    alpha = np.asarray(alpha, dtype=np.float64)
    out = np.empty(alpha.shape)
    lo = alpha <= 0.0
    hi = alpha >= 1.0
    mid = ~(lo | hi)
    out[lo] = 1.0
    out[hi] = 0.0
    out[mid] = ndtr(ndtri(1.0 - alpha[mid]) - mu)
    return out


def gdp_curve(mu: float, alphas=None) -> TradeoffCurve:
    if mu < 0:
        raise InvalidParameterError("mu must be non-negative")
    if alphas is None:
        alphas = default_alpha_grid()
    alphas = np.asarray(alphas, dtype=np.float64)
    betas = gdp_mu_curve_value(mu, alphas)
    if mu == 0.0:
        betas = 1.0 - alphas
    return TradeoffCurve(alphas, betas)


def binary_tradeoff(c: float, A: float) -> TradeoffCurve:
    """Exact trade-off of one stochastic binary mechanism at the worst pair.

    Two linear pieces meeting at alpha* = (A - c) / (2A); the curve is its
    own inverse.
    """
    _check_ca(c, A)
    astar = (A - c) / (2.0 * A)
    return TradeoffCurve(np.array([0.0, astar, 1.0]), np.array([1.0, astar, 0.0]))


def _check_ca(c: float, A: float) -> None:
    if not c > 0:
        raise InvalidParameterError("c must be positive")
    if not A > c:
        raise InvalidParameterError("mechanism degenerate: need A > c")


def mu_of(p: MechanismParams) -> float:
    """Central-limit mu of the (2^n - 1) * d fold composition."""
    _check_ca(p.c, p.A)
    return 2.0 * math.sqrt(p.u * p.d) * p.c / math.sqrt(p.A**2 - p.c**2)


def gamma_of(p: MechanismParams) -> float:
    """Berry-Esseen style correction term; flagged unusable when >= 1/2."""
    _check_ca(p.c, p.A)
    r = p.c / p.A
    bracket = (p.A - p.c) / (2 * p.A) * abs(1 + r) ** 3 + (p.A + p.c) / (2 * p.A) * abs(1 - r) ** 3
    gamma = 0.56 * bracket / ((1 - r**2) ** 1.5 * math.sqrt(p.u * p.d))
    if gamma >= 0.5:
        warnings.warn("gamma >= 1/2: the sandwich bound is not meaningful", stacklevel=2)
    return gamma


def gdp_bound(p: MechanismParams) -> GdpBound:
    return GdpBound(mu=mu_of(p), gamma=gamma_of(p))


def gaussian_mu(C: float, sigma: float) -> float:
    if C <= 0 or sigma <= 0:
        raise InvalidParameterError("C and sigma must be positive")
    return 2.0 * C / sigma


def matched_A(c: float, sigma: float, n: int) -> float:
    """Scale A making the quantizer's mu match the Gaussian mechanism's."""
    if c <= 0 or sigma < 0 or not 1 <= n <= 8:
        raise InvalidParameterError("need c > 0, sigma >= 0, n in 1..8")
    return math.sqrt(c**2 + (2**n - 1) * sigma**2)


def variance_gap(v, p: MechanismParams, sigma: float) -> float:
    """Var(quantizer) - Var(Gaussian) under matched parameters.

    Equals (c^2 d - ||v||^2) / (2^n - 1); zero when every |v_j| = c.
    """
    if abs(p.A**2 - p.c**2 - p.u * sigma**2) > 1e-9 * p.A**2:
        raise InvalidParameterError("parameters not matched: A^2 - c^2 != (2^n - 1) sigma^2")
    vec = np.asarray(v, dtype=np.float64).ravel()
    return float((p.c**2 * vec.size - np.sum(vec**2)) / p.u)


def _kahan_cumsum(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    s = 0.0
    comp = 0.0
    for i, t in enumerate(x):
        y = t - comp
        snew = s + y
        comp = (snew - s) - y
        s = snew
        out[i] = s
    return out


def compose_exact(c: float, A: float, m: int, alphas=None) -> TradeoffCurve:
    """Exact trade-off of m iid stochastic binary mechanisms.

    Under the worst-case pair (v = c vs v' = -c) the sufficient statistic
    is the count of +A outcomes, Binomial(m, (A+c)/2A) under the null and
    Binomial(m, (A-c)/2A) under the alternative.  The likelihood ratio is
    monotone in the count, so randomized threshold tests trace the exact
    lower convex envelope; its vertices are tail sums of the two pmfs.
    """
    _check_ca(c, A)
    if not 1 <= m <= MAX_COMPOSITIONS:
        raise TractabilityError(f"m must be in 1..{MAX_COMPOSITIONS}")
    p1 = (A + c) / (2.0 * A)  # null: v = c
    p0 = (A - c) / (2.0 * A)  # alternative: v' = -c
    k = np.arange(m + 1)
    pmf_null = np.exp(binom.logpmf(k, m, p1))
    pmf_alt = np.exp(binom.logpmf(k, m, p0))
    # alpha vertices: P_null(K <= j); small left-tail terms summed first
    alpha_v = np.clip(_kahan_cumsum(pmf_null), 0.0, 1.0)
    # beta vertices: P_alt(K > j); small right-tail terms summed first
    beta_v = np.clip(_kahan_cumsum(pmf_alt[::-1])[::-1], 0.0, 1.0)
    verts_a = np.concatenate(([0.0], alpha_v))
    verts_b = np.concatenate(([1.0], beta_v[1:], [0.0]))
    verts_a[-1] = 1.0
    # dedupe non-increasing alphas from underflowed tails
    keep = np.concatenate(([True], np.diff(verts_a) > 0))
    verts_a = verts_a[keep]
    verts_b = verts_b[keep]
    if alphas is None:
        alphas = default_alpha_grid()
    grid = np.union1d(np.asarray(alphas, dtype=np.float64), verts_a)
    return TradeoffCurve(grid, np.interp(grid, verts_a, verts_b))


def tradeoff_stats(c: float, A: float) -> TradeoffStats:
    """Log-likelihood-ratio functionals of the binary mechanism's curve."""
    _check_ca(c, A)
    L = math.log((A + c) / (A - c))
    bracket = (A - c) / (2 * A) * abs(1 + c / A) ** 3 + (A + c) / (2 * A) * abs(1 - c / A) ** 3
    return TradeoffStats(
        kl=(c / A) * L,
        kappa2=L**2,
        kappa3=abs(L) ** 3,
        kappa3bar=bracket * abs(L) ** 3,
    )
