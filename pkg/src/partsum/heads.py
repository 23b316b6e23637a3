"""Class and box heads on decoder embeddings, and inference combination."""
from __future__ import annotations

import numpy as np

from . import geometry
from . import tensor as T
from .attention import ConfigError
from .data import Vocab
from .decoder import OBJECT, PREDICATE, SUBJECT
from .nn import MLP, Linear, Module
from .prediction import CompositePrediction
from .tensor import Tensor

MODES = ("part-only", "sum-only", "part-sum")


def _box_head(dim: int, rng) -> MLP:
    return MLP([dim, dim, dim, 4], rng)


class PartHeads(Module):
    """Per-part class/box heads plus a triplet classifier on [q_s, q_o, q_p]."""

    def __init__(self, vocab: Vocab, dim: int, rng: np.random.Generator):
        self.subject_cls = Linear(dim, vocab.n_entity + 1, rng)
        self.object_cls = Linear(dim, vocab.n_entity + 1, rng)
        self.predicate_cls = Linear(dim, vocab.n_predicate + 1, rng)
        self.triplet_cls = Linear(3 * dim, vocab.n_triplet + 1, rng)
        self.subject_box = _box_head(dim, rng)
        self.object_box = _box_head(dim, rng)
        self.predicate_box = _box_head(dim, rng)

    def __call__(self, part: Tensor) -> dict[str, Tensor]:
        """``part``: ``(..., M, 3, D)`` -> logits and sigmoid boxes."""
        *lead, m, p, d = part.shape
        if p != 3:
            raise T.ShapeError(f"part embeddings need 3 parts, got shape {part.shape}")
        if d != self.subject_cls.weight.shape[0]:
            raise ConfigError(f"head width {self.subject_cls.weight.shape[0]} != embedding width {d}")
        qs, qo, qp = part[..., SUBJECT, :], part[..., OBJECT, :], part[..., PREDICATE, :]
        return {
            "subject": self.subject_cls(qs),
            "object": self.object_cls(qo),
            "predicate": self.predicate_cls(qp),
            "triplet": self.triplet_cls(T.reshape(part, (*lead, m, p * d))),
            "subject_box": T.sigmoid(self.subject_box(qs)),
            "object_box": T.sigmoid(self.object_box(qo)),
            "predicate_box": T.sigmoid(self.predicate_box(qp)),
        }


class SumHeads(Module):
    """Class and box heads for all three parts, read from the single sum vector."""

    def __init__(self, vocab: Vocab, dim: int, rng: np.random.Generator):
        self.subject_cls = Linear(dim, vocab.n_entity + 1, rng)
        self.object_cls = Linear(dim, vocab.n_entity + 1, rng)
        self.predicate_cls = Linear(dim, vocab.n_predicate + 1, rng)
        self.subject_box = _box_head(dim, rng)
        self.object_box = _box_head(dim, rng)
        self.predicate_box = _box_head(dim, rng)

    def __call__(self, summ: Tensor) -> dict[str, Tensor]:
        if summ.shape[-1] != self.subject_cls.weight.shape[0]:
            raise ConfigError(f"head width {self.subject_cls.weight.shape[0]} != embedding width {summ.shape[-1]}")
        return {
            "sum_subject": self.subject_cls(summ),
            "sum_object": self.object_cls(summ),
            "sum_predicate": self.predicate_cls(summ),
            "sum_subject_box": T.sigmoid(self.subject_box(summ)),
            "sum_object_box": T.sigmoid(self.object_box(summ)),
            "sum_predicate_box": T.sigmoid(self.predicate_box(summ)),
        }


def part_predict(part_emb: Tensor, heads: PartHeads) -> dict[str, Tensor]:
    return heads(part_emb)


def sum_predict(sum_emb: Tensor, heads: SumHeads) -> dict[str, Tensor]:
    return heads(sum_emb)


def to_prediction(outputs: dict[str, Tensor]) -> CompositePrediction:
    """Softmax the logits and detach everything into a CompositePrediction."""
    fields = {}
    for name, t in outputs.items():
        if name.endswith("_box"):
            fields[name] = t.data
        else:
            d = t.data
            e = np.exp(d - d.max(axis=-1, keepdims=True))
            fields[name] = e / e.sum(axis=-1, keepdims=True)
    return CompositePrediction(**fields)


def _average_boxes(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return geometry.from_corners((geometry.to_corners(a) + geometry.to_corners(b)) / 2)


def combine_inference(pred: CompositePrediction, mode: str = "part-only") -> CompositePrediction:
    """Final subject/predicate/object distributions and boxes for ranking.

    ``part-only`` reads the part heads, ``sum-only`` the sum heads, and
    ``part-sum`` averages the two class distributions elementwise and the
    two boxes' corner coordinates.
    """
    if mode not in MODES:
        raise ValueError(f"unknown inference mode {mode!r}; choose from {MODES}")
    names = ("subject", "predicate", "object", "subject_box", "object_box", "predicate_box")
    part = {n: pred.get(n) for n in names}
    summ = {n: pred.get("sum_" + n) for n in names}
    if mode != "sum-only" and not pred.has_part():
        raise ValueError(f"{mode} inference needs part heads")
    if mode != "part-only" and not pred.has_sum():
        raise ValueError(f"{mode} inference needs sum heads")
    if mode == "part-only":
        chosen = part
    elif mode == "sum-only":
        chosen = summ
    else:
        chosen = {}
        for n in names:
            if n.endswith("_box"):
                chosen[n] = _average_boxes(part[n], summ[n])
            else:
                chosen[n] = (part[n] + summ[n]) / 2
    return CompositePrediction(**chosen)


def available_modes(pred: CompositePrediction) -> list[str]:
    if pred.has_part() and pred.has_sum():
        return list(MODES)
    return ["part-only"] if pred.has_part() else ["sum-only"]


def default_mode(pred: CompositePrediction) -> str:
    """Part heads when present, otherwise the sum (vector) heads."""
    return "part-only" if pred.has_part() else "sum-only"
