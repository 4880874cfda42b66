"""Layers, a post-norm transformer encoder and Adam, built on the tape."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    def parameters(self) -> list[Parameter]:
        params = []
        for value in vars(self).values():
            if isinstance(value, Parameter):
                params.append(value)
            elif isinstance(value, Module):
                params.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        params.extend(item.parameters())
                    elif isinstance(item, Parameter):
                        params.append(item)
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((n_in, n_out))
            b = np.zeros(n_out)
        else:
            bound = 1.0 / math.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(b, f"{name}.bias")

    def __call__(self, x) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, name: str):
        self.gain = Parameter(np.ones(dim), f"{name}.gain")
        self.shift = Parameter(np.zeros(dim), f"{name}.shift")

    def __call__(self, x) -> Tensor:
        return T.add(T.mul(T.layer_norm(x), self.gain), self.shift)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng, name: str):
        if dim % heads:
            raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng, f"{name}.q")
        self.k = Linear(dim, dim, rng, f"{name}.k")
        self.v = Linear(dim, dim, rng, f"{name}.v")
        self.out = Linear(dim, dim, rng, f"{name}.out")

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        x = T.reshape(x, (b, t, self.heads, d // self.heads))
        return T.permute(x, (0, 2, 1, 3))

    def __call__(self, x: Tensor, rate=0.0, rng=None, training=False) -> Tensor:
        b, t, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d // self.heads))
        attn = T.dropout(T.softmax(scores), rate, rng, training)
        ctx = T.permute(T.matmul(attn, v), (0, 2, 1, 3))
        return self.out(T.reshape(ctx, (b, t, d)))


class EncoderLayer(Module):
    """Post-norm block: x = LN(x + MHA(x)); x = LN(x + FF(x))."""

    def __init__(self, dim, ff_dim, heads, dropout, rng, name):
        self.attn = MultiHeadAttention(dim, heads, rng, f"{name}.attn")
        self.norm1 = LayerNorm(dim, f"{name}.norm1")
        self.ff1 = Linear(dim, ff_dim, rng, f"{name}.ff1")
        self.ff2 = Linear(ff_dim, dim, rng, f"{name}.ff2")
        self.norm2 = LayerNorm(dim, f"{name}.norm2")
        self.rate = dropout

    def __call__(self, x, rng=None, training=False):
        r = self.rate
        h = self.attn(x, r, rng, training)
        x = self.norm1(T.add(x, T.dropout(h, r, rng, training)))
        h = self.ff2(T.dropout(T.relu(self.ff1(x)), r, rng, training))
        return self.norm2(T.add(x, T.dropout(h, r, rng, training)))


class MLP(Module):
    def __init__(self, sizes, rng, name, activation="tanh", zero_last=False):
        self.layers = [
            Linear(a, b, rng, f"{name}.{i}", zero_init=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.activation = {"tanh": T.tanh, "relu": T.relu}[activation]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
    if max_norm and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= factor
    return total


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
