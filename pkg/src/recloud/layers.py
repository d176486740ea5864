"""Trainable building blocks on top of the autograd engine."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Parameter:
    """A trainable tensor plus its optimizer moment buffers."""

    def __init__(self, data: np.ndarray, name: str = ""):
        self.tensor = Tensor(np.asarray(data), requires_grad=True)
        self.name = name
        self.moment1 = np.zeros_like(self.tensor.data)
        self.moment2 = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        if value.shape != self.tensor.data.shape:
            raise ValueError(f"parameter {self.name!r}: shape {value.shape} != {self.tensor.data.shape}")
        self.tensor.data = value.astype(self.tensor.data.dtype, copy=False)

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None


class Module:
    """Base for anything holding parameters or sub-modules.

    Attribute definition order (insertion order of ``__dict__``) fixes the
    parameter walk order, so construction is deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in self.__dict__.items():
            path = f"{prefix}{attr}" if prefix else attr
            if isinstance(value, Parameter):
                if not value.name:
                    value.name = path
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        sub = f"{path}.{i}"
                        if not item.name:
                            item.name = sub
                        yield sub, item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    """Affine map on the last axis of a 2-D input: y = x W + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float32, init_std: float = 0.02, zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = rng.normal(0.0, init_std, size=(in_dim, out_dim))
        self.weight = Parameter(w.astype(dtype))
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(ag.matmul(x, self.weight.tensor), self.bias.tensor)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.shift = Parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(ag.mul(ag.layer_norm(x), self.gain.tensor), self.shift.tensor)


class FeedForward(Module):
    """Transformer MLP: linear, GELU, linear."""

    def __init__(self, dim: int, mult: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(dim, dim * mult, rng, dtype)
        self.fc2 = Linear(dim * mult, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def _split(self, x: Tensor, n: int) -> Tensor:
        # (n, d) -> (heads, n, head_dim)
        return ag.transpose(ag.reshape(x, (n, self.heads, self.head_dim)), (1, 0, 2))

    def __call__(self, x: Tensor) -> Tensor:
        n, dim = x.shape
        q = self._split(self.q(x), n)
        k = self._split(self.k(x), n)
        v = self._split(self.v(x), n)
        logits = ag.scale(ag.matmul(q, ag.transpose(k, (0, 2, 1))), self.head_dim ** -0.5)
        attn = ag.softmax(logits, axis=-1)
        out = ag.matmul(attn, v)  # (heads, n, head_dim)
        out = ag.reshape(ag.transpose(out, (1, 0, 2)), (n, dim))
        return self.proj(out)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, dim: int, heads: int, ffn_mult: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = SelfAttention(dim, heads, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, ffn_mult, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = ag.add(x, self.attn(self.ln1(x)))
        return ag.add(x, self.ffn(self.ln2(x)))


def mlp_chain(widths: tuple[int, ...], rng: np.random.Generator,
              dtype=np.float32) -> list[Linear]:
    """Linear layers for a ReLU MLP with the given widths."""
    return [Linear(widths[i], widths[i + 1], rng, dtype) for i in range(len(widths) - 1)]


def run_mlp(layers: list[Linear], x: Tensor) -> Tensor:
    """Apply the chain with ReLU between layers (none after the last)."""
    for layer in layers[:-1]:
        x = ag.relu(layer(x))
    return layers[-1](x)
