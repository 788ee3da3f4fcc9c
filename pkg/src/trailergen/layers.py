"""Transformer building blocks: linear maps, norms, attention and residual layers.

All layers accept either a single sequence [L, d] or a batch [B, L, d]; masks
are boolean numpy arrays broadcast against the attention score shape.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(xavier_uniform(rng, in_dim, out_dim))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.lin1 = Linear(d, hidden, rng)
        self.lin2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ad.relu(self.lin1(x)))


class MultiHeadAttention(Module):
    """Projected multi-head attention: q/k/v projections around the scaled-dot core."""

    def __init__(self, d: int, num_heads: int, rng: np.random.Generator):
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.num_heads = num_heads

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        attended = ad.multi_head_attention(
            self.wq(query), self.wk(key), self.wv(value), self.num_heads, mask=mask)
        return self.wo(attended)


class EncoderLayer(Module):
    """Self-attention + feed-forward residual block.

    ``pre_norm=False`` (default) normalises after each residual add; the
    pre-norm variant normalises the branch input instead.
    """

    def __init__(self, d: int, num_heads: int, ff_dim: int, rng: np.random.Generator,
                 pre_norm: bool = False, eps: float = 1e-5):
        self.attn = MultiHeadAttention(d, num_heads, rng)
        self.ff = FeedForward(d, ff_dim, rng)
        self.norm1 = LayerNorm(d, eps)
        self.norm2 = LayerNorm(d, eps)
        self.pre_norm = pre_norm

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if self.pre_norm:
            nx = self.norm1(x)
            h = ad.add(x, self.attn(nx, nx, nx, mask))
            return ad.add(h, self.ff(self.norm2(h)))
        h = self.norm1(ad.add(x, self.attn(x, x, x, mask)))
        return self.norm2(ad.add(h, self.ff(h)))


class DecoderLayer(Module):
    """Masked self-attention, cross-attention over the encoder memory, feed-forward."""

    def __init__(self, d: int, num_heads: int, ff_dim: int, rng: np.random.Generator,
                 pre_norm: bool = False, eps: float = 1e-5):
        self.self_attn = MultiHeadAttention(d, num_heads, rng)
        self.cross_attn = MultiHeadAttention(d, num_heads, rng)
        self.ff = FeedForward(d, ff_dim, rng)
        self.norm1 = LayerNorm(d, eps)
        self.norm2 = LayerNorm(d, eps)
        self.norm3 = LayerNorm(d, eps)
        self.pre_norm = pre_norm

    def __call__(self, x: Tensor, memory: Tensor,
                 self_mask: np.ndarray | None = None,
                 cross_mask: np.ndarray | None = None) -> Tensor:
        if self.pre_norm:
            nx = self.norm1(x)
            h = ad.add(x, self.self_attn(nx, nx, nx, self_mask))
            h2 = ad.add(h, self.cross_attn(self.norm2(h), memory, memory, cross_mask))
            return ad.add(h2, self.ff(self.norm3(h2)))
        h = self.norm1(ad.add(x, self.self_attn(x, x, x, self_mask)))
        h2 = self.norm2(ad.add(h, self.cross_attn(h, memory, memory, cross_mask)))
        return self.norm3(ad.add(h2, self.ff(h2)))
