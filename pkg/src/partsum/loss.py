"""Hungarian-matched set loss over every decoder layer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import NULL, TargetSet
from .geometry import giou_t, l1_t
from .matching import Assignment, CostWeights, match
from .prediction import BOX_FIELDS, CLASS_FIELDS, CompositePrediction, component_of
from .tensor import ContractError, Tensor


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    eos: float = 0.1
    part: float = 1.0
    sum: float = 1.0

    def cost_weights(self) -> CostWeights:
        return CostWeights(cls=self.cls, l1=self.l1, giou=self.giou)

    def stream_weight(self, name: str) -> float:
        return self.sum if name.startswith("sum_") else self.part


@dataclass
class LossReport:
    """Differentiable ``total`` plus its weighted terms keyed ``layer{l}/{head}/{kind}``.

    ``kind`` is ``nll``, ``l1`` or ``giou``; the terms add up to ``total``.
    """

    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.total.data)

    def by_head(self) -> dict[str, float]:
        """Terms summed over layers, keyed ``{head}/{kind}``."""
        out: dict[str, float] = {}
        for key, v in self.terms.items():
            short = key.split("/", 1)[1]
            out[short] = out.get(short, 0.0) + v
        return out


def detach_prediction(outputs: dict[str, Tensor], layer: int, scene: int) -> CompositePrediction:
    """Probabilities and boxes of one (layer, scene) as arrays for matching."""
    fields = {}
    for name, t in outputs.items():
        d = t.data[layer, scene]
        if name.endswith("_box"):
            fields[name] = d
        else:
            e = np.exp(d - d.max(axis=-1, keepdims=True))
            fields[name] = e / e.sum(axis=-1, keepdims=True)
    return CompositePrediction(**fields)


def match_all(outputs: dict[str, Tensor], targets: Sequence[TargetSet],
              weights: LossWeights = LossWeights()) -> list[list[Assignment]]:
    """Independent assignment for every decoder layer and scene: ``[layer][scene]``."""
    n_layers, n_scenes = _lead(outputs)
    cw = weights.cost_weights()
    return [[match(detach_prediction(outputs, l, b), targets[b], cw) for b in range(n_scenes)]
            for l in range(n_layers)]


def _lead(outputs: dict[str, Tensor]) -> tuple[int, int]:
    shapes = {t.shape[:2] for t in outputs.values()}
    if len(shapes) != 1:
        raise ContractError(f"head outputs disagree on (layers, scenes): {sorted(shapes)}")
    return shapes.pop()


def set_loss(outputs: dict[str, Tensor], targets: Sequence[TargetSet],
             assignments: Sequence[Sequence[Assignment]],
             weights: LossWeights = LossWeights()) -> LossReport:
    """Matched set loss for head outputs shaped ``(layers, scenes, M, ...)``.

    Class heads hold logits: every query pays the negative log-likelihood of
    its assigned label, with no-object queries down-weighted by ``eos``.  Box
    heads pay L1 and 1 - GIoU against real targets only.  Each term is
    divided by M and averaged over scenes, then summed over layers.
    """
    n_layers, n_scenes = _lead(outputs)
    if len(assignments) != n_layers or any(len(a) != n_scenes for a in assignments):
        raise ContractError(f"need assignments for {n_layers} layers x {n_scenes} scenes")
    if len(targets) != n_scenes:
        raise ContractError(f"{len(targets)} target sets for {n_scenes} scenes")
    m = next(iter(outputs.values())).shape[2]
    for ts in targets:
        if len(ts) != m:
            raise ContractError(f"targets padded to {len(ts)}, predictions have {m} queries")
    sigma = np.array([[a.sigma for a in row] for row in assignments], dtype=np.int64)  # (L, B, M)
    if sigma.shape != (n_layers, n_scenes, m):
        raise ContractError(f"assignment shape {sigma.shape} does not match ({n_layers}, {n_scenes}, {m})")
    scene_idx = np.arange(n_scenes)[None, :, None]
    norm = 1.0 / (m * n_scenes)

    pieces: list[Tensor] = []
    terms: dict[str, float] = {}

    def add(name: str, kind: str, per_layer: Tensor):
        for l in range(n_layers):
            terms[f"layer{l}/{name}/{kind}"] = float(per_layer.data[l])
        pieces.append(T.tsum(per_layer))

    for name in CLASS_FIELDS:
        logits = outputs.get(name)
        if logits is None:
            continue
        comp = component_of(name)
        labels = np.stack([ts.labels(comp) for ts in targets])[scene_idx, sigma]   # (L, B, M)
        real = np.stack([ts.real for ts in targets])[scene_idx, sigma]
        n_cls = logits.shape[-1]
        if np.any(labels[real] >= n_cls - 1):
            raise ContractError(f"{name}: target label outside {n_cls - 1} classes")
        w = np.where(real, 1.0, weights.eos)
        w = np.where(real & (labels == NULL), 0.0, w)  # real target with no label here (unseen triplet)
        tgt = np.where(labels == NULL, n_cls - 1, labels)
        nll = T.scale(T.pick(T.log_softmax(logits), tgt), -1.0)
        coef = weights.cls * weights.stream_weight(name) * norm
        add(name, "nll", T.tsum(T.mul(nll, w * coef), axis=(1, 2)))

    for name in BOX_FIELDS:
        boxes = outputs.get(name)
        if boxes is None:
            continue
        comp = component_of(name)
        tb = np.stack([ts.boxes(comp) for ts in targets])[scene_idx, sigma]      # (L, B, M, 4)
        real = np.stack([ts.real for ts in targets])[scene_idx, sigma].astype(float)
        coef = weights.stream_weight(name) * norm
        l1 = T.tsum(T.mul(l1_t(boxes, tb), real * weights.l1 * coef), axis=(1, 2))
        add(name, "l1", l1)
        slack = T.sub(1.0, giou_t(boxes, tb))
        add(name, "giou", T.tsum(T.mul(slack, real * weights.giou * coef), axis=(1, 2)))

    if not pieces:
        raise ContractError("no head outputs to compute a loss from")
    total = pieces[0]
    for p in pieces[1:]:
        total = T.add(total, p)
    return LossReport(total, terms)


def matched_loss(outputs: dict[str, Tensor], targets: Sequence[TargetSet],
                 weights: LossWeights = LossWeights()) -> tuple[LossReport, list[list[Assignment]]]:
    assignments = match_all(outputs, targets, weights)
    return set_loss(outputs, targets, assignments, weights), assignments
