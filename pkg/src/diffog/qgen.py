"""Generators for the SPD cost matrix Q.

Three variants share one interface (``generator(actions, training, rng)``
returns a batched Q tensor):

* ``TransformerQ``: a per-step transformer encoder reads the chunk and emits
  an ``n*n`` embedding that is turned into an SPD matrix.
* ``MatrixQ``: a single learned square matrix goes through the same SPD
  construction, so Q does not depend on the input.
* ``StaticQ``: Q = I, nothing to learn.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import EncoderLayer, Linear, Module
from .tensor import Parameter, Tensor

EPSILON = 1e-4
CLAMP = (-10.0, 10.0)


@dataclass
class EncoderConfig:
    embed_dim: int = 256
    feedforward_dim: int = 256
    heads: int = 4
    layers: int = 2
    dropout_rate: float = 0.1
    T_p: int = 16
    D_a: int = 3

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def n(self) -> int:
        return self.T_p * self.D_a

    def to_dict(self):
        return asdict(self)


@dataclass
class SpdCost:
    Q: np.ndarray
    L: np.ndarray
    epsilon: float = EPSILON


def spd_from_square(M, epsilon=EPSILON, clamp=CLAMP):
    """SPD construction on the tape for (..., n, n) input; returns (Q, L) tensors.

    diag <- exp(diag) + eps, clamp, keep the lower triangle,
    Q = L L' + eps I, then symmetrize.
    """
    M = T.tensor(M)
    n = M.shape[-1]
    L = T.tril(T.clamp(T.exp_diagonal(M, epsilon), *clamp))
    Q = T.add(T.matmul(L, T.transpose(L)), epsilon * np.eye(n))
    Q = T.scale(T.add(Q, T.transpose(Q)), 0.5)
    return Q, L


def _side(length) -> int:
    n = int(round(np.sqrt(length)))
    if n * n != length:
        raise ValueError(f"embedding length {length} is not a perfect square")
    return n


def build_spd_tensor(e, epsilon=EPSILON, clamp=CLAMP):
    """Embedding(s) of length n*n, shape (..., n*n), to (Q, L) tensors."""
    e = T.tensor(e)
    n = _side(e.shape[-1])
    return spd_from_square(T.reshape(e, e.shape[:-1] + (n, n)), epsilon, clamp)


def build_spd(e, epsilon=EPSILON, clamp=CLAMP) -> SpdCost:
    Q, L = build_spd_tensor(np.asarray(e, dtype=np.float64), epsilon, clamp)
    return SpdCost(Q.value, L.value, epsilon)


def matrix_learning_Q(Lparam, epsilon=EPSILON, clamp=CLAMP) -> SpdCost:
    value = getattr(Lparam, "value", Lparam)
    if np.ndim(value) != 2 or value.shape[0] != value.shape[1]:
        raise ValueError(f"learned matrix must be square, got shape {np.shape(value)}")
    Q, L = spd_from_square(value, epsilon, clamp)
    return SpdCost(Q.value, L.value, epsilon)


def static_Q(n: int) -> SpdCost:
    if n < 1:
        raise ValueError("n must be positive")
    return SpdCost(np.eye(n), np.eye(n), 0.0)


def diagonality(Q, epsilon=EPSILON) -> float:
    """sum_i Q_ii^2 / (sum_ij Q_ij^2 + eps)."""
    Q = np.asarray(getattr(Q, "Q", Q), dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError(f"Q must be square, got shape {Q.shape}")
    return float((np.diag(Q) ** 2).sum() / ((Q ** 2).sum() + epsilon))


class TransformerEncoder(Module):
    """Per-step tokens, learned positions, post-norm blocks, flatten-and-project head."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        self.embed = Linear(cfg.D_a, d, rng, "encoder.embed")
        self.position = Parameter(rng.normal(0.0, 0.02, size=(cfg.T_p, d)), "encoder.position")
        self.blocks = [EncoderLayer(d, cfg.feedforward_dim, cfg.heads, cfg.dropout_rate,
                                    rng, f"encoder.block{i}") for i in range(cfg.layers)]
        # zero head: the first Q is (1+eps)^2 I + eps I, i.e. near passthrough
        self.head = Linear(cfg.T_p * d, cfg.n * cfg.n, rng, "encoder.head", zero_init=True)
        # Adam moves every head weight by about lr per step; without this factor
        # the embedding would move by lr * fan_in, which blows Q up on step one
        self.head_scale = 1.0 / np.sqrt(cfg.T_p * d)

    def __call__(self, actions, training=False, rng=None) -> Tensor:
        """(B, T_p, D_a) actions to (B, n*n) embeddings."""
        actions = T.tensor(actions)
        B = actions.shape[0]
        if actions.shape[1:] != (self.cfg.T_p, self.cfg.D_a):
            raise T.ShapeError(f"encoder expects (B, {self.cfg.T_p}, {self.cfg.D_a}) chunks, "
                               f"got {actions.shape}")
        x = T.add(self.embed(actions), self.position)
        x = T.dropout(x, self.cfg.dropout_rate, rng, training)
        for block in self.blocks:
            x = block(x, rng, training)
        return T.scale(self.head(T.reshape(x, (B, -1))), self.head_scale)


def encode(chunk, cfg: EncoderConfig, encoder: TransformerEncoder, mode="eval",
           rng=None) -> np.ndarray:
    """Embedding e_t of length (T_p*D_a)^2 for one chunk."""
    values = np.asarray(getattr(chunk, "values", chunk), dtype=np.float64)
    if values.size != cfg.n:
        raise ValueError(f"chunk has {values.size} values, encoder expects {cfg.n}")
    out = encoder(values.reshape(1, cfg.T_p, cfg.D_a), training=mode == "train", rng=rng)
    return out.value[0]


class QGenerator(Module):
    kind = "base"

    def __call__(self, actions, training=False, rng=None) -> Tensor:
        raise NotImplementedError

    def spd(self, actions) -> np.ndarray:
        """Evaluation-mode Q for a batch of (B, T_p, D_a) chunks."""
        return self(np.asarray(actions, dtype=np.float64)).value


class TransformerQ(QGenerator):
    kind = "transformer"

    def __init__(self, cfg: EncoderConfig, rng, epsilon=EPSILON):
        self.cfg = cfg
        self.epsilon = epsilon
        self.encoder = TransformerEncoder(cfg, rng)

    def __call__(self, actions, training=False, rng=None):
        e = self.encoder(actions, training, rng)
        return build_spd_tensor(e, self.epsilon)[0]


class MatrixQ(QGenerator):
    kind = "matrix_learning"

    def __init__(self, n: int, epsilon=EPSILON):
        self.n = n
        self.epsilon = epsilon
        self.matrix = Parameter(np.zeros((n, n)), "matrix.L")

    def __call__(self, actions, training=False, rng=None):
        B = np.shape(getattr(actions, "value", actions))[0]
        Q, _ = spd_from_square(self.matrix, self.epsilon)
        return T.add(Q, np.zeros((B, self.n, self.n)))


class StaticQ(QGenerator):
    kind = "static"

    def __init__(self, n: int):
        self.n = n

    def __call__(self, actions, training=False, rng=None):
        B = np.shape(getattr(actions, "value", actions))[0]
        return T.tensor(np.broadcast_to(np.eye(self.n), (B, self.n, self.n)))


def make_generator(kind: str, cfg: EncoderConfig, rng, epsilon=EPSILON) -> QGenerator:
    if kind == "transformer":
        return TransformerQ(cfg, rng, epsilon)
    if kind == "matrix_learning":
        return MatrixQ(cfg.n, epsilon)
    if kind == "static":
        return StaticQ(cfg.n)
    raise ValueError(f"unknown Q variant {kind!r}")
