"""Encoder, composite decoder and heads assembled into one trainable model."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, Encoder
from .data import Vocab
from .decoder import Decoder, DecoderConfig, DecoderOutput
from .heads import PartHeads, SumHeads, to_prediction
from .nn import Module
from .prediction import CompositePrediction
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    grid: int = 8

    def to_json(self) -> dict:
        return {"attention": asdict(self.attention), "decoder": asdict(self.decoder), "grid": self.grid}

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(AttentionConfig(**obj["attention"]), DecoderConfig(**obj["decoder"]), int(obj["grid"]))


class PSTModel(Module):
    """Tokens ``(B, g*g, F)`` in, per-layer head outputs ``(L, B, M, ...)`` out.

    Head parameters are shared by all decoder layers; the layers are stacked
    and pushed through the heads in one call.
    """

    def __init__(self, config: ModelConfig, vocab: Vocab, n_features: int, rng: np.random.Generator):
        self.config = config
        self.vocab = vocab
        a = config.attention
        self.encoder = Encoder(n_features, config.grid * config.grid, a, rng)
        self.decoder = Decoder(config.decoder, a.model_dim, a.n_heads, a.ffn_dim, rng)
        self.part_heads = PartHeads(vocab, a.model_dim, rng) if config.decoder.has_parts else None
        self.sum_heads = SumHeads(vocab, a.model_dim, rng) if config.decoder.has_sum else None

    def forward(self, tokens, capture: bool = False) -> tuple[dict[str, Tensor], DecoderOutput]:
        tokens = T.as_tensor(tokens)
        if tokens.ndim == 2:
            tokens = T.reshape(tokens, (1, *tokens.shape))
        dec = self.decoder(self.encoder(tokens), capture=capture)
        outputs: dict[str, Tensor] = {}
        if self.part_heads is not None:
            outputs.update(self.part_heads(T.stack(dec.parts, axis=0)))
        if self.sum_heads is not None:
            outputs.update(self.sum_heads(T.stack(dec.sums, axis=0)))
        return outputs, dec

    __call__ = forward

    def predict(self, tokens, layer: int = -1) -> CompositePrediction:
        """Probabilities and boxes of one decoder layer, ``(B, M, ...)`` arrays."""
        with T.no_grad():
            outputs, _ = self.forward(tokens)
        return to_prediction({k: Tensor(v.data[layer]) for k, v in outputs.items()})
