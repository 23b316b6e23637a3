"""Transformer decoders over vector, tensor and composite queries.

Five designs share one code path:

==================  ===========================================================
vanilla-vector      M relation vectors through SA -> CA -> FFN
vanilla-tensor      M x 3 part tokens through plain SA -> CA -> FFN
part-factorized     as vanilla-tensor, SA split into intra- then inter-relation
vanilla-composite   M x (3 parts + 1 sum) tokens mixed in one plain stream
part-and-sum        separate part and sum streams plus groupwise interaction
==================  ===========================================================

Part tokens are ordered (subject, object, predicate) within every relation,
and part group i always belongs to sum query i.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (ConfigError, CrossAttentionBlock, FFNBlock, SelfAttentionBlock,
                        TokenMemory)
from .nn import LayerNorm, Module, param
from .tensor import Tensor

VARIANTS = ("vanilla-vector", "vanilla-tensor", "part-factorized", "vanilla-composite", "part-and-sum")
TABLE_ROWS = dict(zip("abcde", VARIANTS))
INTERACTIONS = ("summation", "self-attention", "none")
N_PARTS = 3
SUBJECT, OBJECT, PREDICATE = 0, 1, 2


@dataclass(frozen=True)
class DecoderConfig:
    variant: str = "part-and-sum"
    n_layers: int = 3
    n_queries: int = 16
    streams: str = "independent"
    interaction: str | None = None
    factorized: bool = True
    inter_relation: bool = True

    def __post_init__(self):
        if self.variant in TABLE_ROWS:
            object.__setattr__(self, "variant", TABLE_ROWS[self.variant])
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown decoder variant {self.variant!r}; choose from {VARIANTS}")
        if self.n_layers < 1 or self.n_queries < 1:
            raise ConfigError("n_layers and n_queries must be positive")
        if self.streams not in ("shared", "independent"):
            raise ConfigError(f"streams must be 'shared' or 'independent', got {self.streams!r}")
        if self.interaction is None:
            default = "summation" if self.variant == "part-and-sum" else "none"
            object.__setattr__(self, "interaction", default)
        if self.interaction not in INTERACTIONS:
            raise ConfigError(f"unknown interaction {self.interaction!r}")
        if self.variant != "part-and-sum" and self.interaction != "none":
            raise ConfigError(f"interaction {self.interaction!r} needs the part-and-sum variant, "
                              f"not {self.variant!r}")

    @property
    def has_parts(self) -> bool:
        return self.variant != "vanilla-vector"

    @property
    def has_sum(self) -> bool:
        return self.variant in ("vanilla-vector", "vanilla-composite", "part-and-sum")

    @property
    def uses_factorized(self) -> bool:
        return self.variant == "part-factorized" or (self.variant == "part-and-sum" and self.factorized)


@dataclass
class CompositeQuerySet:
    """``part``: (M, 3, D) ordered subject/object/predicate; ``sum``: (M, D)."""

    part: Tensor | None
    sum: Tensor | None

    def permute(self, perm) -> "CompositeQuerySet":
        perm = np.asarray(perm)
        return CompositeQuerySet(
            None if self.part is None else T.Tensor(self.part.data[perm], self.part.requires_grad),
            None if self.sum is None else T.Tensor(self.sum.data[perm], self.sum.requires_grad))


@dataclass
class DecoderOutput:
    parts: list[Tensor] = field(default_factory=list)
    sums: list[Tensor] = field(default_factory=list)
    attention: list[dict[str, np.ndarray]] | None = None

    def __len__(self) -> int:
        return max(len(self.parts), len(self.sums))


class QueryEmbeddings(Module):
    def __init__(self, config: DecoderConfig, dim: int, rng: np.random.Generator):
        m = config.n_queries
        self.part = param(rng.normal(0.0, 0.02, (m, N_PARTS, dim))) if config.has_parts else None
        self.sum = param(rng.normal(0.0, 0.02, (m, dim))) if config.has_sum else None

    def query_set(self) -> CompositeQuerySet:
        return CompositeQuerySet(self.part, self.sum)


class FactorizedSelfAttention(Module):
    """Intra-relation SA over each (s, o, p) group, then inter-relation SA over all parts.

    Each stage is its own residual + layer-norm block.
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, inter_relation: bool = True):
        self.intra = SelfAttentionBlock(dim, n_heads, rng)
        self.inter = SelfAttentionBlock(dim, n_heads, rng)
        self.inter_relation = inter_relation

    def __call__(self, x: Tensor, pos: Tensor) -> Tensor:
        """``x`` and ``pos`` are ``(..., M, 3, D)``."""
        x = self.intra(x, pos)
        if not self.inter_relation:
            return x
        return _grouped(self.inter, x, pos)


def _flatten_groups(x: Tensor) -> Tensor:
    *lead, m, p, d = x.shape
    return T.reshape(x, (*lead, m * p, d))


def _unflatten_groups(x: Tensor, p: int) -> Tensor:
    *lead, n, d = x.shape
    return T.reshape(x, (*lead, n // p, p, d))


def _grouped(block, x: Tensor, pos: Tensor) -> Tensor:
    """Run a token-sequence block over all M x P tokens jointly."""
    p = x.shape[-2]
    y = block(_flatten_groups(x), _flatten_groups(pos))
    return _unflatten_groups(y, p)


class PartSumInteraction(Module):
    """Groupwise exchange: part_k <- N(part_k + sum); sum <- N(sum + sum_k part_k).

    Both updates read the pre-update embeddings.
    """

    def __init__(self, dim: int):
        self.part_norm = LayerNorm(dim)
        self.sum_norm = LayerNorm(dim)

    def __call__(self, part: Tensor, summ: Tensor) -> tuple[Tensor, Tensor]:
        *lead, d = summ.shape
        new_part = self.part_norm(T.add(part, T.reshape(summ, (*lead, 1, d))))
        new_sum = self.sum_norm(T.add(summ, T.tsum(part, axis=-2)))
        return new_part, new_sum


class AttentionInteraction(Module):
    """Plain self-attention over the four tokens {s, o, p, G} of each relation."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        self.block = SelfAttentionBlock(dim, n_heads, rng)

    def __call__(self, part, summ, part_pos, sum_pos):
        *lead, d = summ.shape
        x = T.concat([part, T.reshape(summ, (*lead, 1, d))], axis=-2)
        pos = T.concat([part_pos, T.reshape(sum_pos, (*sum_pos.shape[:-1], 1, d))], axis=-2)
        y = self.block(x, pos)
        return y[..., :N_PARTS, :], y[..., N_PARTS, :]


class Stream(Module):
    """One decoding stream: SA (plain or factorized) -> CA -> FFN."""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int, rng: np.random.Generator,
                 factorized: bool = False, inter_relation: bool = True):
        self.self_attn = (FactorizedSelfAttention(dim, n_heads, rng, inter_relation) if factorized
                          else SelfAttentionBlock(dim, n_heads, rng))
        self.cross_attn = CrossAttentionBlock(dim, n_heads, rng)
        self.ffn = FFNBlock(dim, ffn_dim, rng)

    def plain_sa(self) -> SelfAttentionBlock:
        sa = self.self_attn
        return sa.inter if isinstance(sa, FactorizedSelfAttention) else sa

    def __call__(self, x: Tensor, pos: Tensor, memory: TokenMemory, grouped: bool,
                 capture: bool = False, sa: SelfAttentionBlock | None = None):
        """``x``/``pos`` are ``(..., N, D)`` or grouped ``(..., M, P, D)``."""
        if isinstance(self.self_attn, FactorizedSelfAttention) and sa is None:
            x = self.self_attn(x, pos)
        else:
            block = sa or self.plain_sa()
            x = _grouped(block, x, pos) if grouped else block(x, pos)
        flat_x = _flatten_groups(x) if grouped else x
        flat_pos = _flatten_groups(pos) if grouped else pos
        out = self.cross_attn(flat_x, memory.tokens, flat_pos, memory.pos_emb, return_weights=capture)
        weights = None
        if capture:
            out, w = out
            weights = w.mean(axis=-3)
        out = self.ffn(out)
        if grouped:
            out = _unflatten_groups(out, x.shape[-2])
            if weights is not None:
                weights = weights.reshape(*weights.shape[:-2], x.shape[-3], x.shape[-2], weights.shape[-1])
        return out, weights


class DecoderLayer(Module):
    def __init__(self, config: DecoderConfig, dim: int, n_heads: int, ffn_dim: int,
                 rng: np.random.Generator):
        v = config.variant
        self.config = config
        self.part_stream = None
        self.sum_stream = None
        self.interaction = None
        if v == "vanilla-vector":
            self.sum_stream = Stream(dim, n_heads, ffn_dim, rng)
        elif v in ("vanilla-tensor", "vanilla-composite"):
            self.part_stream = Stream(dim, n_heads, ffn_dim, rng)
        elif v == "part-factorized":
            self.part_stream = Stream(dim, n_heads, ffn_dim, rng, factorized=True,
                                      inter_relation=config.inter_relation)
        else:
            self.part_stream = Stream(dim, n_heads, ffn_dim, rng, factorized=config.factorized,
                                      inter_relation=config.inter_relation)
            if config.streams == "independent":
                self.sum_stream = Stream(dim, n_heads, ffn_dim, rng)
            if config.interaction == "summation":
                self.interaction = PartSumInteraction(dim)
            elif config.interaction == "self-attention":
                self.interaction = AttentionInteraction(dim, n_heads, rng)

    def __call__(self, part, summ, part_pos, sum_pos, memory: TokenMemory, capture: bool = False):
        v = self.config.variant
        attn: dict[str, np.ndarray] = {}
        if v == "vanilla-vector":
            summ, w = self.sum_stream(summ, sum_pos, memory, grouped=False, capture=capture)
            attn["sum"] = w
        elif v == "vanilla-composite":
            *lead, d = summ.shape
            x = T.concat([part, T.reshape(summ, (*lead, 1, d))], axis=-2)
            pos = T.concat([part_pos, T.reshape(sum_pos, (*sum_pos.shape[:-1], 1, d))], axis=-2)
            x, w = self.part_stream(x, pos, memory, grouped=True, capture=capture)
            part, summ = x[..., :N_PARTS, :], x[..., N_PARTS, :]
            if w is not None:
                attn["part"], attn["sum"] = w[..., :N_PARTS, :], w[..., N_PARTS, :]
        elif v in ("vanilla-tensor", "part-factorized"):
            part, attn["part"] = self.part_stream(part, part_pos, memory, grouped=True, capture=capture)
        else:
            new_part, attn["part"] = self.part_stream(part, part_pos, memory, grouped=True, capture=capture)
            if self.sum_stream is not None:
                new_sum, attn["sum"] = self.sum_stream(summ, sum_pos, memory, grouped=False, capture=capture)
            else:
                stream = self.part_stream
                new_sum, attn["sum"] = stream(summ, sum_pos, memory, grouped=False, capture=capture,
                                              sa=stream.plain_sa())
            part, summ = new_part, new_sum
            if isinstance(self.interaction, PartSumInteraction):
                part, summ = self.interaction(part, summ)
            elif isinstance(self.interaction, AttentionInteraction):
                part, summ = self.interaction(part, summ, part_pos, sum_pos)
        return part, summ, attn


class Decoder(Module):
    """Learnable queries plus ``n_layers`` decoder layers of the configured design."""

    def __init__(self, config: DecoderConfig, dim: int, n_heads: int, ffn_dim: int,
                 rng: np.random.Generator):
        self.config = config
        self.queries = QueryEmbeddings(config, dim, rng)
        self.layers = [DecoderLayer(config, dim, n_heads, ffn_dim, rng) for _ in range(config.n_layers)]

    def __call__(self, memory: TokenMemory, queries: CompositeQuerySet | None = None,
                 capture: bool = False) -> DecoderOutput:
        return decode(queries or self.queries.query_set(), memory, self, capture)


def decode(queries: CompositeQuerySet, memory: TokenMemory, decoder: Decoder,
           capture: bool = False) -> DecoderOutput:
    """Run every layer; query embeddings double as positional embeddings at each layer."""
    cfg = decoder.config
    part_pos, sum_pos = queries.part, queries.sum
    if cfg.has_parts and part_pos is None or cfg.has_sum and sum_pos is None:
        raise ConfigError(f"variant {cfg.variant} needs both query kinds it decodes")
    part, summ = part_pos, sum_pos
    out = DecoderOutput(attention=[] if capture else None)
    for layer in decoder.layers:
        part, summ, attn = layer(part, summ, part_pos, sum_pos, memory, capture)
        if cfg.has_parts:
            out.parts.append(part)
        if cfg.has_sum:
            out.sums.append(summ)
        if capture:
            out.attention.append({k: v for k, v in attn.items() if v is not None})
    return out
