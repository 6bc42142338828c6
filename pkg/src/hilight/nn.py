"""Parameter containers and transformer building blocks on top of the tensor core."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ATTENTION_MASK_VALUE, Tensor


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Attribute-walking parameter registry, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def set_trainable(self, trainable: bool) -> None:
        for p in self.parameters():
            p.requires_grad = trainable

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def snap_to_float32(self) -> None:
        """Round parameters to float32-representable values (checkpoint storage precision)."""
        for p in self.parameters():
            p.data[...] = p.data.astype(np.float32).astype(np.float64)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, epsilon: float = 1e-5):
        self.gain = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))
        self.epsilon = epsilon

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.epsilon)


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, count: int, d: int, std: float = 0.02):
        self.weight = parameter(rng.normal(0.0, std, size=(count, d)))

    def forward(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class MultiHeadAttention(Module):
    """Multi-head attention; ``memory`` defaults to the queries (self-attention).

    ``allowed`` is a boolean array broadcastable to (B, heads, Sq, Sk) where
    true keeps the query/key pair.
    """

    def __init__(self, rng: np.random.Generator, d: int, heads: int, d_memory: int | None = None):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        d_memory = d if d_memory is None else d_memory
        self.heads = heads
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d_memory, d)
        self.v = Linear(rng, d_memory, d)
        self.o = Linear(rng, d, d)

    def _split(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        return x.reshape(b, s, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, memory: Tensor | None = None, allowed=None, return_weights: bool = False):
        memory = x if memory is None else memory
        b, s, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d // self.heads))
        if allowed is not None:
            scores = T.masked_fill(scores, ~np.asarray(allowed, dtype=bool), ATTENTION_MASK_VALUE)
        weights = T.softmax(scores, axis=-1)
        mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
        out = self.o(mixed)
        return (out, weights) if return_weights else out


class MLP(Module):
    def __init__(self, rng: np.random.Generator, d: int, ratio: int = 4):
        self.fc = Linear(rng, d, ratio * d)
        self.proj = Linear(rng, ratio * d, d)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(T.gelu(self.fc(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, rng: np.random.Generator, d: int, heads: int):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, heads)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(rng, d)

    def forward(self, x: Tensor, allowed=None, return_weights: bool = False):
        attended = self.attn(self.ln1(x), allowed=allowed, return_weights=return_weights)
        if return_weights:
            attended, weights = attended
        x = x + attended
        x = x + self.mlp(self.ln2(x))
        return (x, weights) if return_weights else x
