"""Layer primitives built on the tensor library: modules, linear maps,
normalized transformer sublayers, and multi-head attention."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, concat, gelu, layernorm, matmul, reshape, softmax, transpose


class Module:
    """Base class with recursive parameter discovery via attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}" if prefix else key
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float32, init_scale: float = 1.0, bias: bool = True):
        std = init_scale / math.sqrt(in_dim)
        self.weight = Tensor((rng.standard_normal((in_dim, out_dim)) * std).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Linear → GELU → Linear, the standard transformer feed-forward."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    x = reshape(x, b, n, heads, d // heads)
    return transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, hd = x.shape
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, b, n, h * hd)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Softmax(Q Kᵀ / √d) V over the last two axes; inputs are (..., N, d)."""
    d = q.shape[-1]
    logits = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    weights = softmax(logits * (1.0 / math.sqrt(d)), axis=-1)
    return matmul(weights, v)


class MultiHeadAttention(Module):
    """Multi-head attention; queries from x, keys/values from memory.

    Self-attention is the memory=x case. ``out_init_scale=0`` gives a
    zero-initialized output projection so the residual branch starts inert.
    """

    def __init__(self, query_dim: int, memory_dim: int, heads: int, head_dim: int,
                 rng: np.random.Generator, dtype=np.float32, out_init_scale: float = 1.0):
        inner = heads * head_dim
        self.heads = heads
        self.q_proj = Linear(query_dim, inner, rng, dtype=dtype, bias=False)
        self.k_proj = Linear(memory_dim, inner, rng, dtype=dtype, bias=False)
        self.v_proj = Linear(memory_dim, inner, rng, dtype=dtype, bias=False)
        self.out_proj = Linear(inner, query_dim, rng, dtype=dtype, init_scale=out_init_scale)

    def __call__(self, x: Tensor, memory: Tensor | None = None) -> Tensor:
        mem = x if memory is None else memory
        q = _split_heads(self.q_proj(x), self.heads)
        k = _split_heads(self.k_proj(mem), self.heads)
        v = _split_heads(self.v_proj(mem), self.heads)
        return self.out_proj(_merge_heads(scaled_dot_attention(q, k, v)))


class TransformerBlock(Module):
    """Pre-norm residual block: LN → attention → LN → MLP."""

    def __init__(self, dim: int, heads: int, head_dim: int, mlp_ratio: float,
                 rng: np.random.Generator, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, dim, heads, head_dim, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class CrossAttentionBlock(Module):
    """Pre-norm residual cross-attention with zero-initialized output proj."""

    def __init__(self, dim: int, memory_dim: int, heads: int, head_dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, memory_dim, heads, head_dim, rng,
                                       dtype=dtype, out_init_scale=0.0)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        return x + self.attn(self.norm(x), memory)
