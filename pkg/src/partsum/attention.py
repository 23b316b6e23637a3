"""Multi-head attention, post-norm residual blocks and the token encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, param
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    n_encoder_layers: int = 2

    def __post_init__(self):
        if min(self.model_dim, self.n_heads, self.ffn_dim) < 1 or self.n_encoder_layers < 0:
            raise ConfigError(f"invalid attention config {self}")
        if self.model_dim % self.n_heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by n_heads {self.n_heads}")


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``n_heads`` heads of width D/n_heads."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads:
            raise ConfigError(f"dim {dim} is not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        x = T.reshape(x, (*lead, n, self.n_heads, d // self.n_heads))
        return T.swapaxes(x, -2, -3)

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor,
                 mask: np.ndarray | None = None, return_weights: bool = False):
        """queries ``(..., Nq, D)``, keys/values ``(..., Nk, D)``.

        ``mask`` is boolean ``(Nq, Nk)`` (broadcastable), True where attention
        is allowed.  Returns the ``(..., Nq, D)`` output, plus the
        ``(..., n_heads, Nq, Nk)`` weights when ``return_weights``.
        """
        d = queries.shape[-1]
        if keys.shape[-1] != d or values.shape[-1] != d or keys.shape[-2] != values.shape[-2]:
            raise T.ShapeError(f"attention: queries {queries.shape}, keys {keys.shape}, values {values.shape}")
        dh = d // self.n_heads
        q = self._split(T.scale(self.q_proj(queries), 1.0 / np.sqrt(dh)))
        k = self._split(self.k_proj(keys))
        v = self._split(self.v_proj(values))
        weights = T.softmax(T.matmul(q, T.transpose_last(k)), mask)
        out = T.matmul(weights, v)
        *lead, h, n, _ = out.shape
        out = T.reshape(T.swapaxes(out, -2, -3), (*lead, n, d))
        out = self.out_proj(out)
        if return_weights:
            return out, weights.data
        return out


def _with_pos(x: Tensor, pos) -> Tensor:
    return x if pos is None else T.add(x, pos)


class SelfAttentionBlock(Module):
    """``norm(x + SA(x + pos, x + pos, x))``."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dim, n_heads, rng)
        self.norm = LayerNorm(dim)

    def __call__(self, x: Tensor, pos=None, mask=None) -> Tensor:
        qk = _with_pos(x, pos)
        return self.norm(T.add(x, self.attn(qk, qk, x, mask)))


class CrossAttentionBlock(Module):
    """``norm(x + CA(x + query_pos, memory + memory_pos, memory))``."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dim, n_heads, rng)
        self.norm = LayerNorm(dim)

    def __call__(self, x: Tensor, memory: Tensor, pos=None, memory_pos=None,
                 return_weights: bool = False):
        out = self.attn(_with_pos(x, pos), _with_pos(memory, memory_pos), memory,
                        return_weights=return_weights)
        if return_weights:
            out, w = out
            return self.norm(T.add(x, out)), w
        return self.norm(T.add(x, out))


class FFNBlock(Module):
    """``norm(x + W2 relu(W1 x))`` with a two-layer feed-forward net."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.norm = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(T.add(x, self.fc2(T.relu(self.fc1(x)))))


@dataclass
class TokenMemory:
    """Encoded tokens ``(..., T, D)`` and their positional embeddings ``(T, D)``."""

    tokens: Tensor
    pos_emb: Tensor


def sine_positions(n_tokens: int, dim: int) -> np.ndarray:
    """2-D sinusoidal table for a square token grid (1-D for other counts)."""
    g = int(round(np.sqrt(n_tokens)))
    if g * g == n_tokens and dim % 4 == 0:
        ys, xs = np.divmod(np.arange(n_tokens), g)
        coords = [(xs + 0.5) / g, (ys + 0.5) / g]
        quarter = dim // 4
        freqs = 2.0 ** np.arange(quarter) * np.pi / 2
        parts = []
        for c in coords:
            ang = c[:, None] * freqs[None, :]
            parts += [np.sin(ang), np.cos(ang)]
        return np.concatenate(parts, axis=1)
    pos = np.arange(n_tokens)[:, None]
    i = np.arange(dim)[None, :]
    ang = pos / 10000 ** (2 * (i // 2) / dim)
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


class Encoder(Module):
    """Linear projection F -> D followed by self-attention + FFN layers."""

    def __init__(self, n_features: int, n_tokens: int, config: AttentionConfig, rng: np.random.Generator):
        self.config = config
        self.input_proj = Linear(n_features, config.model_dim, rng)
        self.pos_emb = param(sine_positions(n_tokens, config.model_dim))
        self.attn_layers = [SelfAttentionBlock(config.model_dim, config.n_heads, rng)
                            for _ in range(config.n_encoder_layers)]
        self.ffn_layers = [FFNBlock(config.model_dim, config.ffn_dim, rng)
                           for _ in range(config.n_encoder_layers)]

    def forward(self, raw_tokens, pos: Tensor) -> Tensor:
        x = self.input_proj(T.as_tensor(raw_tokens))
        for sa, ffn in zip(self.attn_layers, self.ffn_layers):
            x = ffn(sa(x, pos))
        return x

    def __call__(self, raw_tokens) -> TokenMemory:
        raw_tokens = T.as_tensor(raw_tokens)
        if raw_tokens.shape[-2] != self.pos_emb.shape[0]:
            raise T.ShapeError(f"encoder expects {self.pos_emb.shape[0]} tokens, got {raw_tokens.shape}")
        return TokenMemory(self.forward(raw_tokens, self.pos_emb), self.pos_emb)


def encode(raw_tokens, encoder: Encoder) -> TokenMemory:
    return encoder(raw_tokens)
