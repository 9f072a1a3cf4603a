"""Toy next-token model standing in for the frozen server model, plus
soft-prompt tuning with analytic gradients.

The context state is the mean of the soft-prompt rows and the privatized
embeddings seen so far; logits are a frozen linear map of that state.
Gradients of the NLL with respect to the prompt are closed-form, so no
autodiff framework is needed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import EmbeddingTable, InvalidInputError, InvalidParameterError, RngHandle, TokenSequence
from .pipeline import PipelineConfig, privatize_tokens, reconstruct

PROMPT_MAGIC = b"DELS"


@dataclass
class ToyLm:
    table: EmbeddingTable
    W_out: np.ndarray  # V x b
    bias: np.ndarray  # V

    def __post_init__(self):
        self.W_out = np.asarray(self.W_out, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.W_out.shape != (self.table.V, self.table.b) or self.bias.shape != (self.table.V,):
            raise InvalidInputError("output projection must be V x b with a V bias")
        if not (np.all(np.isfinite(self.W_out)) and np.all(np.isfinite(self.bias))):
            raise InvalidInputError("model parameters must be finite")

    @property
    def V(self) -> int:
        return self.table.V


def tied_lm(table: EmbeddingTable, bias: np.ndarray | None = None, scale: float = 1.0) -> ToyLm:
    """Model whose output projection is the (optionally scaled) embedding table.

    `scale` sharpens the logits; the mean-pooled states of a toy table have
    small norm, so unscaled logits are nearly uniform.
    """
    if bias is None:
        bias = np.zeros(table.V)
    return ToyLm(table, scale * table.rows, np.asarray(bias, dtype=np.float64))


@dataclass
class SoftPrompt:
    E: np.ndarray  # r x b

    def __post_init__(self):
        self.E = np.asarray(self.E, dtype=np.float64)
        if self.E.ndim != 2:
            raise InvalidInputError("soft prompt must be r x b")
        if not np.all(np.isfinite(self.E)):
            raise InvalidInputError("soft prompt must be finite")

    @property
    def r(self) -> int:
        return self.E.shape[0]

    @property
    def b(self) -> int:
        return self.E.shape[1]


def empty_prompt(b: int) -> SoftPrompt:
    return SoftPrompt(np.zeros((0, b)))


def context_state(E: SoftPrompt, xhat: np.ndarray, t: int) -> np.ndarray:
    """Mean-pooled state over the prompt rows and the first t embeddings."""
    xhat = np.asarray(xhat, dtype=np.float64)
    if not 1 <= t <= xhat.shape[0]:
        raise InvalidInputError(f"position t must be in 1..{xhat.shape[0]}")
    return (E.E.sum(axis=0) + xhat[:t].sum(axis=0)) / (E.r + t)


def _all_states(E: SoftPrompt, xhat: np.ndarray) -> np.ndarray:
    prefix = np.cumsum(xhat, axis=0)
    t = np.arange(1, xhat.shape[0] + 1)
    return (E.E.sum(axis=0) + prefix) / (E.r + t)[:, None]


def _position_logits(model: ToyLm, E: SoftPrompt, xhat: np.ndarray) -> np.ndarray:
    return _all_states(E, xhat) @ model.W_out.T + model.bias


def next_token_nll(model: ToyLm, E: SoftPrompt, xhat: np.ndarray, targets: TokenSequence) -> float:
    """Mean -log p(target_{t+1} | state_t) over positions t = 1..T-1."""
    xhat = np.asarray(xhat, dtype=np.float64)
    if xhat.ndim != 2 or xhat.shape[1] != model.table.b:
        raise InvalidInputError("embedding batch must be T x b")
    T = xhat.shape[0]
    if len(targets) != T:
        raise InvalidInputError("targets length must match batch length")
    if T < 2:
        raise InvalidInputError("need at least 2 tokens for next-token NLL")
    targets.check_vocab(model.V)
    logits = _position_logits(model, E, xhat)[: T - 1]
    logz = logsumexp(logits, axis=1)
    picked = logits[np.arange(T - 1), list(targets.ids[1:])]
    return float(np.mean(logz - picked))


def perplexity(model: ToyLm, E: SoftPrompt, xhat: np.ndarray, targets: TokenSequence) -> float:
    return float(np.exp(next_token_nll(model, E, xhat, targets)))


def nll_prompt_grad(model: ToyLm, E: SoftPrompt, xhat: np.ndarray,
                    targets: TokenSequence) -> tuple[float, np.ndarray]:
    """NLL and its analytic gradient with respect to the prompt rows.

    Mean pooling makes the gradient identical across rows: each row receives
    sum_t W_out^T (softmax_t - onehot_t) / ((r + t)(T - 1)).
    """
    xhat = np.asarray(xhat, dtype=np.float64)
    T = xhat.shape[0]
    logits = _position_logits(model, E, xhat)[: T - 1]
    logz = logsumexp(logits, axis=1)
    probs = np.exp(logits - logz[:, None])
    tgt = np.asarray(targets.ids[1:])
    nll = float(np.mean(logz - logits[np.arange(T - 1), tgt]))
    delta = probs
    delta[np.arange(T - 1), tgt] -= 1.0
    weights = 1.0 / (E.r + np.arange(1, T))
    g_state = (delta * weights[:, None]).sum(axis=0) / (T - 1)
    row_grad = model.W_out.T @ g_state
    return nll, np.tile(row_grad, (E.r, 1))


def corpus_nll(model: ToyLm, E: SoftPrompt, batches: list[np.ndarray],
               corpus: list[TokenSequence]) -> float:
    return float(np.mean([next_token_nll(model, E, x, s) for x, s in zip(batches, corpus)]))


def tune_soft_prompt(model: ToyLm, cfg: PipelineConfig, corpus: list[TokenSequence],
                     r: int = 20, epochs: int = 50, lr: float = 1.0,
                     rng: RngHandle | None = None) -> SoftPrompt:
    """Gradient descent on the prompt only; the model stays frozen.

    Privatized inputs are regenerated each epoch with fresh mechanism noise
    so the prompt adapts to the mechanism's output distribution, not to one
    noise realization.
    """
    if lr <= 0:
        raise InvalidParameterError("lr must be positive")
    if rng is None:
        rng = RngHandle(0)
    if r == 0:
        return empty_prompt(model.table.b)
    init_rows = rng.child(0).generator().integers(0, model.V, size=r)
    E = SoftPrompt(model.table.rows[init_rows].copy())
    prev = np.inf
    for epoch in range(epochs):
        erng = rng.child(1 + epoch)
        total_grad = np.zeros_like(E.E)
        total_nll = 0.0
        for i, seq in enumerate(corpus):
            q = privatize_tokens(seq, cfg, erng.child(i))
            xhat = reconstruct(q, cfg.proj)
            nll, grad = nll_prompt_grad(model, E, xhat, seq)
            total_grad += grad
            total_nll += nll
        total_nll /= len(corpus)
        total_grad /= len(corpus)
        if total_nll > prev:
            lr *= 0.5
        prev = total_nll
        E = SoftPrompt(E.E - lr * total_grad)
    return E


def save_prompt(path, prompt: SoftPrompt) -> None:
    with open(path, "wb") as fh:
        fh.write(PROMPT_MAGIC)
        fh.write(struct.pack("<BII", 1, prompt.r, prompt.b))
        fh.write(prompt.E.astype("<f8").tobytes())


def load_prompt(path) -> SoftPrompt:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 13 or data[:4] != PROMPT_MAGIC:
        raise InvalidInputError("not a soft prompt file")
    version, r, b = struct.unpack("<BII", data[4:13])
    if version != 1:
        raise InvalidInputError(f"unsupported prompt version {version}")
    body = np.frombuffer(data[13:], dtype="<f8")
    if body.size != r * b:
        raise InvalidInputError("prompt payload truncated")
    return SoftPrompt(body.reshape(r, b).copy())


def load_corpus(path) -> list[TokenSequence]:
    """Newline-delimited sequences of comma-separated integer token ids."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(TokenSequence(int(x) for x in line.split(",")))
    return out


def save_corpus(path, corpus: list[TokenSequence]) -> None:
    with open(path, "w") as fh:
        for seq in corpus:
            fh.write(",".join(str(i) for i in seq.ids) + "\n")
