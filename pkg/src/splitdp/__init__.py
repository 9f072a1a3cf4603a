"""Differentially private split inference toolkit.

Privatizes token embeddings through a low-dimensional projection and a
stochastic n-bit quantization mechanism, accounts privacy in the f-DP
framework, ships the quantized latents over a bit-packed wire protocol,
and restores utility with a server-side soft prompt.
"""

from .core import (
    EmbeddingTable,
    InvalidInputError,
    InvalidParameterError,
    LatentBatch,
    PreconditionError,
    RngHandle,
    SplitdpError,
    TokenSequence,
    TractabilityError,
    binomial_draw,
    clamp_coords,
    clip_l2,
    load_table,
    save_table,
)
from .mech import (
    CorruptPayloadError,
    MechanismParams,
    QuantizedBatch,
    dequantize,
    gaussian_mechanism,
    gaussian_then_qsgd,
    mechanism_variance,
    stochastic_quantize,
)
from .fdp import (
    GdpBound,
    TradeoffCurve,
    TradeoffStats,
    binary_tradeoff,
    compose_exact,
    gamma_of,
    gaussian_mu,
    gdp_bound,
    gdp_curve,
    matched_A,
    mu_of,
    tradeoff_stats,
    variance_gap,
)
from .proj import (
    ProjectionPair,
    decode,
    encode,
    identity_pair,
    load_projection,
    reconstruction_mse,
    save_projection,
    train_projection,
)
from .lm import (
    SoftPrompt,
    ToyLm,
    context_state,
    corpus_nll,
    empty_prompt,
    load_corpus,
    load_prompt,
    next_token_nll,
    nll_prompt_grad,
    perplexity,
    save_corpus,
    save_prompt,
    tied_lm,
    tune_soft_prompt,
)
from .attack import AttackReport, invert_embeddings, latent_reference, predict_tokens
from .calib import A_of_mu, BracketExhaustedError, CalibrationResult, calibrate_to_asr, measure_asr
from .pipeline import (
    PipelineConfig,
    clamped_latents,
    generate_greedy,
    privatize_tokens,
    reconstruct,
    run_split_inference,
)
from .wire import ProtocolError, ServerArtifacts, client_round_trip, pack, serve_session, unpack

__version__ = "0.1.0"
