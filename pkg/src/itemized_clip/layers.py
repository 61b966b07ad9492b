"""Parameter containers and transformer building blocks on top of autograd."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Collects Tensor attributes (and child modules) as named parameters."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    out.update(child.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def normal_init(rng: np.random.Generator, shape, std: float) -> Tensor:
    return param(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = normal_init(rng, (d_in, d_out), std)
        self.bias = param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.weight, self.bias)


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, std: float = 0.02):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, std)
        self.proj = Linear(dim, dim, rng, std)

    def __call__(self, x: Tensor, key_visible: np.ndarray | None = None) -> Tensor:
        # x: (B, L, d); key_visible: (B, L) bool
        b, n, d = x.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(x).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)  # (3, b, h, n, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        visible = None if key_visible is None else key_visible[:, None, None, :]
        w = ag.masked_softmax(logits, visible)
        out = ag.matmul(w, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(out)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, std: float = 0.02):
        self.fc1 = Linear(dim, hidden, rng, std)
        self.fc2 = Linear(hidden, dim, rng, std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator, std: float = 0.02):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng, std)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng, std)

    def __call__(self, x: Tensor, key_visible: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), key_visible)
        return x + self.mlp(self.norm2(x))
