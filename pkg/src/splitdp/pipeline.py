"""End-to-end client/server pipeline helpers shared by tuning, calibration,
the wire protocol, and the CLI harness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EmbeddingTable, LatentBatch, RngHandle, TokenSequence, clamp_coords
from .mech import MechanismParams, QuantizedBatch, dequantize, stochastic_quantize
from .proj import ProjectionPair, decode, encode


@dataclass
class PipelineConfig:
    """Client-side artifacts: embedding table, encoder, mechanism params."""

    table: EmbeddingTable
    proj: ProjectionPair
    params: MechanismParams


def clamped_latents(x: np.ndarray, cfg: PipelineConfig) -> LatentBatch:
    return LatentBatch(clamp_coords(encode(x, cfg.proj).values, cfg.params.c))


def privatize_tokens(tokens: TokenSequence, cfg: PipelineConfig, rng: RngHandle) -> QuantizedBatch:
    """embed -> encode -> clamp -> stochastic quantize."""
    x = cfg.table.embed(tokens)
    v = clamped_latents(x, cfg)
    return stochastic_quantize(v, cfg.params, rng)


def reconstruct(q: QuantizedBatch, proj: ProjectionPair) -> np.ndarray:
    """Server side: dequantize and decode back to embedding space."""
    return decode(dequantize(q), proj)


def generate_greedy(model, soft_prompt, xhat: np.ndarray, length: int) -> list[int]:
    """Greedy continuation of `length` tokens from the privatized context."""
    from .lm import context_state  # local import to avoid a cycle

    context = [row for row in xhat]
    out = []
    for _ in range(length):
        h = context_state(soft_prompt, np.asarray(context), len(context))
        logits = model.W_out @ h + model.bias
        tok = int(np.argmax(logits))
        out.append(tok)
        context.append(model.table.rows[tok])
    return out


def run_split_inference(tokens: TokenSequence, cfg: PipelineConfig, model, soft_prompt,
                        server_proj: ProjectionPair, rng: RngHandle, length: int) -> list[int]:
    """In-process oracle for the full client/server round trip."""
    q = privatize_tokens(tokens, cfg, rng)
    xhat = reconstruct(q, server_proj)
    return generate_greedy(model, soft_prompt, xhat, length)
