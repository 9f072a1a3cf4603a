"""Map privacy level mu to the mechanism scale A, and binary-search mu to
hit a target attack success rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .attack import invert_embeddings, latent_reference
from .core import InvalidParameterError, RngHandle, SplitdpError, TokenSequence
from .mech import dequantize
from .pipeline import PipelineConfig, privatize_tokens


class BracketExhaustedError(SplitdpError):
    def __init__(self, target: float, low_asr: float, high_asr: float):
        super().__init__(
            f"target ASR {target} outside reachable bracket [{low_asr:.4f}, {high_asr:.4f}]"
        )
        self.low_asr = low_asr
        self.high_asr = high_asr


def A_of_mu(mu: float, c: float, n: int, d: int) -> float:
    """Invert the composition-mu formula: A = c sqrt(1 + 4(2^n - 1)d / mu^2)."""
    if mu <= 0:
        raise InvalidParameterError("mu must be positive")
    return c * math.sqrt(1.0 + 4.0 * (2**n - 1) * d / mu**2)


@dataclass
class CalibrationResult:
    mu: float
    A: float
    asr: float
    trace: list  # (iter, mu, A, asr) tuples


def measure_asr(mu: float, cfg: PipelineConfig, eval_tokens: TokenSequence,
                rng: RngHandle, metric: str = "cosine") -> tuple[float, float]:
    """ASR of the inversion attack on the dequantized latents at level mu."""
    p = cfg.params
    A = A_of_mu(mu, p.c, p.n, p.d)
    probe_cfg = PipelineConfig(cfg.table, cfg.proj, replace(p, A=A))
    q = privatize_tokens(eval_tokens, probe_cfg, rng)
    vhat = dequantize(q)
    ref = latent_reference(cfg.table, cfg.proj, p.c)
    report = invert_embeddings(vhat, ref, eval_tokens, metric=metric)
    return report.asr, A


def calibrate_to_asr(target_asr: float, cfg: PipelineConfig, eval_tokens: TokenSequence,
                     tol: float = 0.01, max_iters: int = 40, rng: RngHandle | None = None,
                     mu_lo: float = 0.1, mu_hi: float = 200.0,
                     metric: str = "cosine") -> CalibrationResult:
    """Bisection on mu; each probe is made deterministic by a probe-indexed
    seed so the noisy ASR(mu) curve behaves as a fixed monotone function.
    """
    if not 0.0 < target_asr < 1.0:
        raise InvalidParameterError("target ASR must be in (0, 1)")
    if tol <= 0:
        raise InvalidParameterError("tol must be positive")
    if rng is None:
        rng = RngHandle(0)
    trace = []

    def probe(mu, idx):
        asr, A = measure_asr(mu, cfg, eval_tokens, rng.child(idx), metric)
        trace.append((idx, mu, A, asr))
        return asr

    asr_lo = probe(mu_lo, 0)
    asr_hi = probe(mu_hi, 1)
    if not asr_lo - tol <= target_asr <= asr_hi + tol:
        raise BracketExhaustedError(target_asr, asr_lo, asr_hi)
    lo, hi = mu_lo, mu_hi
    best = min(trace, key=lambda t: abs(t[3] - target_asr))
    for it in range(2, max_iters + 2):
        mid = 0.5 * (lo + hi)
        asr = probe(mid, it)
        if abs(asr - target_asr) < abs(best[3] - target_asr):
            best = trace[-1]
        if abs(asr - target_asr) <= tol:
            break
        if asr < target_asr:
            lo = mid
        else:
            hi = mid
    return CalibrationResult(mu=best[1], A=best[2], asr=best[3], trace=trace)


def write_trace_csv(path, result: CalibrationResult, seed: int | None = None) -> None:
    with open(path, "w") as fh:
        fh.write(f"# splitdp calibration-trace v1 seed={seed}\n")
        fh.write("iter,mu,A,asr\n")
        for it, mu, A, asr in result.trace:
            fh.write(f"{it},{mu:.17g},{A:.17g},{asr:.17g}\n")
