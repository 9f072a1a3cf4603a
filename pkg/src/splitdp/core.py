"""Domain types, seeded counter-based randomness, and shared primitives."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

_M64 = (1 << 64) - 1

TABLE_MAGIC = b"DELE"


class SplitdpError(Exception):
    pass


class InvalidParameterError(SplitdpError, ValueError):
    """A configuration value is outside its allowed range."""


class InvalidInputError(SplitdpError, ValueError):
    """Runtime data violates an operation's contract (shape, finiteness)."""


class PreconditionError(SplitdpError, ValueError):
    """Caller-side contract violation, e.g. a coordinate outside [-c, c]."""


class TractabilityError(SplitdpError, ValueError):
    """The requested exact computation exceeds the supported size."""


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return (z ^ (z >> 31)) & _M64


@dataclass(frozen=True)
class RngHandle:
    """Counter-based seeded randomness; (seed, stream) fully determines draws.

    Every call to :meth:`generator` restarts the stream, so operations taking
    a handle are pure.  Distinct stream ids give statistically independent
    Philox streams; :meth:`child` derives sub-streams deterministically.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[self.seed & _M64, self.stream & _M64]))

    def child(self, index: int) -> "RngHandle":
        return RngHandle(self.seed, _splitmix64((self.stream * 0x9E3779B97F4A7C15 + index + 1) & _M64))


@dataclass(frozen=True)
class TokenSequence:
    """Vocabulary indices for one text sequence; length T >= 1."""

    ids: tuple

    def __init__(self, ids):
        arr = tuple(int(i) for i in ids)
        if len(arr) < 1:
            raise InvalidInputError("token sequence must have length >= 1")
        if any(i < 0 for i in arr):
            raise InvalidInputError("token ids must be non-negative")
        object.__setattr__(self, "ids", arr)

    def __len__(self) -> int:
        return len(self.ids)

    def check_vocab(self, vocab_size: int) -> None:
        if any(i >= vocab_size for i in self.ids):
            raise InvalidInputError("token id out of vocabulary range")


@dataclass
class EmbeddingTable:
    """V x b vocabulary embedding matrix."""

    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise InvalidInputError("embedding table must be 2-D")
        if self.rows.shape[0] < 2 or self.rows.shape[1] < 1:
            raise InvalidInputError("embedding table needs V >= 2 and b >= 1")
        if not np.all(np.isfinite(self.rows)):
            raise InvalidInputError("embedding table entries must be finite")

    @property
    def V(self) -> int:
        return self.rows.shape[0]

    @property
    def b(self) -> int:
        return self.rows.shape[1]

    def embed(self, tokens: TokenSequence) -> np.ndarray:
        tokens.check_vocab(self.V)
        return self.rows[list(tokens.ids)]


@dataclass
class LatentBatch:
    """T x d real latents."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InvalidInputError("latent batch must be 2-D (T x d)")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("latent values must be finite")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def binomial_draw(rng: RngHandle, u: int, p: float) -> int:
    """Exact Binomial(u, p) draw via the inverse-CDF kernel; 1 <= u <= 255."""
    if not 0.0 <= p <= 1.0:
        raise InvalidParameterError(f"p must be in [0, 1], got {p}")
    if not 1 <= u <= 255:
        raise InvalidParameterError(f"u must be in [1, 255], got {u}")
    unif = rng.generator().random(1)
    return int(_kernels.binomial_levels(np.array([p]), unif, u)[0])


def clip_l2(x: np.ndarray, C: float) -> np.ndarray:
    """Project x into the l2 ball of radius C."""
    if C <= 0:
        raise InvalidParameterError("clip radius C must be positive")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("clip_l2 input must be finite")
    norm = float(np.linalg.norm(x))
    if norm <= C:
        return x.copy()
    return x * (C / norm)


def clamp_coords(v: np.ndarray, c: float) -> np.ndarray:
    """Saturate each coordinate into [-c, c]."""
    if c <= 0:
        raise InvalidParameterError("coordinate bound c must be positive")
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("clamp_coords input must be finite")
    return np.clip(v, -c, c)


def save_table(path, table: EmbeddingTable) -> None:
    """Write the `DELE` embedding table file (float32 rows, little-endian)."""
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<BBII", 1, 0, table.b, table.V))
        fh.write(table.rows.astype("<f4").tobytes())


def load_table(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 14 or data[:4] != TABLE_MAGIC:
        raise InvalidInputError("not an embedding table file")
    version, dtype, b, V = struct.unpack("<BBII", data[4:14])
    if version != 1 or dtype != 0:
        raise InvalidInputError(f"unsupported table version/dtype {version}/{dtype}")
    body = np.frombuffer(data[14:], dtype="<f4")
    if body.size != V * b:
        raise InvalidInputError("embedding table payload truncated")
    return EmbeddingTable(body.reshape(V, b).astype(np.float64))
