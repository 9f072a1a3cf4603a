"""Embedding inversion attack: nearest-vocabulary-entry recovery and
attack-success-rate measurement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import EmbeddingTable, InvalidInputError, LatentBatch, TokenSequence, clamp_coords
from .proj import ProjectionPair, encode

METRICS = ("cosine", "l2")


@dataclass
class AttackReport:
    total: int
    recovered: int
    hits: np.ndarray
    metric: str
    space: str = "latent"

    @property
    def asr(self) -> float:
        return self.recovered / self.total

    def to_json(self) -> str:
        return json.dumps({
            "total": self.total,
            "recovered": self.recovered,
            "asr": self.asr,
            "metric": self.metric,
            "space": self.space,
        })


def _as_array(observed) -> np.ndarray:
    if isinstance(observed, LatentBatch):
        return observed.values
    arr = np.asarray(observed, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError("observed batch must be 2-D")
    return arr


def predict_tokens(observed, reference: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Most-similar vocabulary row per observation, ties to the lowest index."""
    obs = _as_array(observed)
    ref = np.asarray(reference, dtype=np.float64)
    if ref.ndim != 2 or ref.shape[1] != obs.shape[1]:
        raise InvalidInputError("reference rows must match observation dimension")
    if metric == "cosine":
        norms = np.linalg.norm(ref, axis=1)
        norms[norms == 0] = 1.0
        scores = obs @ (ref / norms[:, None]).T
        return np.argmax(scores, axis=1)
    if metric == "l2":
        # argmin ||o - r||^2 = argmin (||r||^2 - 2 o.r); ||o||^2 is constant per row
        scores = np.sum(ref**2, axis=1)[None, :] - 2.0 * (obs @ ref.T)
        return np.argmin(scores, axis=1)
    raise InvalidInputError(f"unknown metric {metric!r}")


def invert_embeddings(observed, reference: np.ndarray, truth: TokenSequence,
                      metric: str = "cosine", space: str = "latent") -> AttackReport:
    obs = _as_array(observed)
    if len(truth) != obs.shape[0]:
        raise InvalidInputError("truth length must match observed length")
    pred = predict_tokens(obs, reference, metric)
    hits = pred == np.asarray(truth.ids)
    return AttackReport(
        total=obs.shape[0],
        recovered=int(hits.sum()),
        hits=hits,
        metric=metric,
        space=space,
    )


def latent_reference(table: EmbeddingTable, pp: ProjectionPair, c: float) -> np.ndarray:
    """Adversary's candidate table: the public encoder applied to the vocabulary."""
    return clamp_coords(encode(table.rows, pp).values, c)
