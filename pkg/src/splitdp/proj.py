"""Linear encoder/decoder pair for dimensionality reduction, trained at
desk scale by full-batch gradient descent on reconstruction MSE.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .core import InvalidInputError, InvalidParameterError, LatentBatch, RngHandle

PROJ_MAGIC = b"DELP"


@dataclass
class ProjectionPair:
    W_enc: np.ndarray  # d x b
    W_dec: np.ndarray  # b x d
    trained: bool = False

    def __post_init__(self):
        self.W_enc = np.asarray(self.W_enc, dtype=np.float64)
        self.W_dec = np.asarray(self.W_dec, dtype=np.float64)
        if self.W_enc.ndim != 2 or self.W_dec.ndim != 2:
            raise InvalidInputError("projection weights must be 2-D")
        if self.W_enc.shape != self.W_dec.shape[::-1]:
            raise InvalidInputError("encoder d x b must mirror decoder b x d")
        if not (np.all(np.isfinite(self.W_enc)) and np.all(np.isfinite(self.W_dec))):
            raise InvalidInputError("projection weights must be finite")

    @property
    def d(self) -> int:
        return self.W_enc.shape[0]

    @property
    def b(self) -> int:
        return self.W_enc.shape[1]


def identity_pair(b: int) -> ProjectionPair:
    return ProjectionPair(np.eye(b), np.eye(b), trained=True)


def encode(x: np.ndarray, pp: ProjectionPair) -> LatentBatch:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != pp.b:
        raise InvalidInputError(f"expected T x {pp.b} embedding batch")
    return LatentBatch(x @ pp.W_enc.T)


def decode(v, pp: ProjectionPair) -> np.ndarray:
    arr = v.values if isinstance(v, LatentBatch) else np.asarray(v, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != pp.d:
        raise InvalidInputError(f"expected T x {pp.d} latent batch")
    return arr @ pp.W_dec.T


def reconstruction_mse(x: np.ndarray, pp: ProjectionPair) -> float:
    err = decode(encode(x, pp), pp) - x
    return float(np.mean(err**2))


def _mse_and_grads(x, W_enc, W_dec):
    n, b = x.shape
    v = x @ W_enc.T
    xhat = v @ W_dec.T
    err = xhat - x
    mse = float(np.mean(err**2))
    g_out = 2.0 * err / (n * b)
    g_dec = g_out.T @ v
    g_enc = (g_out @ W_dec).T @ x
    return mse, g_enc, g_dec


def train_projection(samples: np.ndarray, d: int, epochs: int = 500, lr: float = 1.0,
                     rng: RngHandle | None = None) -> ProjectionPair:
    """Full-batch gradient descent on MSE(x, W_dec W_enc x).

    The learning rate halves whenever an epoch increases the loss; training
    stops after `epochs` or once the loss change drops below 1e-10.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise InvalidInputError("samples must be N x b")
    if lr <= 0:
        raise InvalidParameterError("lr must be positive")
    n, b = samples.shape
    if n < d:
        warnings.warn("fewer samples than latent dims: problem is ill-posed", stacklevel=2)
    if rng is None:
        rng = RngHandle(0)
    gen = rng.generator()
    scale = 1.0 / np.sqrt(b)
    W_enc = gen.uniform(-scale, scale, size=(d, b))
    W_dec = gen.uniform(-scale, scale, size=(b, d))
    prev, _, _ = _mse_and_grads(samples, W_enc, W_dec)
    for _ in range(epochs):
        _, g_enc, g_dec = _mse_and_grads(samples, W_enc, W_dec)
        W_enc_new = W_enc - lr * g_enc
        W_dec_new = W_dec - lr * g_dec
        loss, _, _ = _mse_and_grads(samples, W_enc_new, W_dec_new)
        if loss > prev:
            lr *= 0.5
            continue
        W_enc, W_dec = W_enc_new, W_dec_new
        if prev - loss < 1e-10:
            prev = loss
            break
        prev = loss
    return ProjectionPair(W_enc, W_dec, trained=True)


def save_projection(path, pp: ProjectionPair) -> None:
    with open(path, "wb") as fh:
        fh.write(PROJ_MAGIC)
        fh.write(struct.pack("<BII", 1, pp.b, pp.d))
        fh.write(pp.W_enc.astype("<f8").tobytes())
        fh.write(pp.W_dec.astype("<f8").tobytes())


def load_projection(path) -> ProjectionPair:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 13 or data[:4] != PROJ_MAGIC:
        raise InvalidInputError("not a projection file")
    version, b, d = struct.unpack("<BII", data[4:13])
    if version != 1:
        raise InvalidInputError(f"unsupported projection version {version}")
    body = np.frombuffer(data[13:], dtype="<f8")
    if body.size != 2 * b * d:
        raise InvalidInputError("projection payload truncated")
    W_enc = body[: d * b].reshape(d, b)
    W_dec = body[d * b:].reshape(b, d)
    return ProjectionPair(W_enc.copy(), W_dec.copy(), trained=True)
