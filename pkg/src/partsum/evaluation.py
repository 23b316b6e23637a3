"""Relationship and phrase Recall@K, triplet mAP, and prediction dumps."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import geometry
from .data import RelationInstance
from .geometry import Box
from .heads import combine_inference
from .prediction import BOX_FIELDS, CLASS_FIELDS, CompositePrediction

IOU_THRESHOLD = 0.5
RECALL_MODES = ("relationship", "phrase")


class EmptyGroundTruthWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RankedTriplet:
    score: float
    subject: int
    predicate: int
    object: int
    boxes: tuple[Box, ...]  # (subject, object) or (union,)
    query: int

    @property
    def triplet(self) -> tuple[int, int, int]:
        return (self.subject, self.predicate, self.object)


def rank_predictions(pred: CompositePrediction, mode: str = "relationship",
                     k_pred: int = 1) -> list[RankedTriplet]:
    """Candidates of one scene sorted by joint probability.

    ``pred`` holds combined ``subject``/``predicate``/``object`` distributions
    (last class = no-object) and boxes.  A query whose subject, predicate or
    object distribution peaks at no-object emits nothing; otherwise it emits
    its top ``k_pred`` real predicates with the argmax real subject and object.
    Ties keep query order, then predicate order.
    """
    if k_pred < 1:
        raise ValueError("k_pred must be at least 1")
    if mode not in RECALL_MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {RECALL_MODES}")
    ps, pp, po = pred.subject, pred.predicate, pred.object
    if ps is None or pp is None or po is None:
        raise ValueError("ranking needs subject, predicate and object distributions")
    out: list[tuple] = []
    for i in range(ps.shape[0]):
        if any(np.argmax(d[i]) == d.shape[-1] - 1 for d in (ps, pp, po)):
            continue
        s = int(np.argmax(ps[i, :-1]))
        o = int(np.argmax(po[i, :-1]))
        sb, ob = Box(*pred.subject_box[i]), Box(*pred.object_box[i])
        boxes = (sb, ob) if mode == "relationship" else (Box(*geometry.union_box(sb, ob)),)
        real_p = pp[i, :-1]
        order = np.argsort(-real_p, kind="stable")[:k_pred]
        for p in order:
            score = float(ps[i, s] * real_p[p] * po[i, o])
            out.append((-score, i, int(p), RankedTriplet(score, s, int(p), o, boxes, i)))
    out.sort(key=lambda t: t[:3])
    return [t[3] for t in out]


def _gt_boxes(gt: RelationInstance, mode: str) -> tuple[Box, ...]:
    if mode == "relationship":
        return (Box(*gt.subject_box), Box(*gt.object_box))
    return (gt.union_box,)


def _overlap(cand: RankedTriplet, gt: RelationInstance, mode: str) -> float:
    """Smallest IoU over the required box pairs."""
    return min(float(geometry.iou(a, b)) for a, b in zip(cand.boxes, _gt_boxes(gt, mode)))


def _greedy_hits(ranked: Sequence[RankedTriplet], gt: Sequence[RelationInstance], mode: str) -> list[bool]:
    """Per candidate, whether it claims a so-far unclaimed ground truth."""
    taken = [False] * len(gt)
    hits = []
    for cand in ranked:
        best, best_iou = -1, IOU_THRESHOLD
        for j, g in enumerate(gt):
            if taken[j] or g.triplet != cand.triplet:
                continue
            ov = _overlap(cand, g, mode)
            if ov > best_iou:
                best, best_iou = j, ov
        if best >= 0:
            taken[best] = True
        hits.append(best >= 0)
    return hits


def recall_hits(ranked: Sequence[RankedTriplet], gt: Sequence[RelationInstance], k: int,
                mode: str = "relationship") -> int:
    if k < 1:
        raise ValueError("K must be at least 1")
    return int(sum(_greedy_hits(list(ranked)[:k], gt, mode)))


def recall_at_k(ranked: Sequence[RankedTriplet], gt: Sequence[RelationInstance], k: int,
                mode: str = "relationship") -> float:
    """Fraction of ground-truth triplets recovered in the top ``k`` candidates."""
    hits = recall_hits(ranked, gt, k, mode)
    if not gt:
        warnings.warn("recall of a scene without ground truth is taken as 1.0", EmptyGroundTruthWarning)
        return 1.0
    return hits / len(gt)


def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """Area under the precision envelope over all recall points."""
    if n_gt == 0:
        raise ValueError("average precision needs at least one ground truth")
    tp = np.asarray(tp, dtype=float)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def map_default(ranked_per_image: Sequence[Sequence[RankedTriplet]],
                gt_per_image: Sequence[Sequence[RelationInstance]]) -> float:
    """Mean over ground-truth (s, p, o) categories of average precision.

    A detection is a true positive when its triplet matches an unclaimed
    ground truth of the same image with IoU above 0.5 on both boxes.
    """
    if len(ranked_per_image) != len(gt_per_image):
        raise ValueError("need one ranked list per image")
    categories = sorted({g.triplet for gts in gt_per_image for g in gts})
    if not categories:
        return 0.0
    aps = []
    for cat in categories:
        dets = []
        for img, ranked in enumerate(ranked_per_image):
            for r, cand in enumerate(ranked):
                if cand.triplet == cat:
                    dets.append((-cand.score, img, r, cand))
        dets.sort(key=lambda t: t[:3])
        gts = [[g for g in gt_per_image[img] if g.triplet == cat] for img in range(len(gt_per_image))]
        taken = [[False] * len(g) for g in gts]
        tp = []
        for _, img, _, cand in dets:
            best, best_iou = -1, IOU_THRESHOLD
            for j, g in enumerate(gts[img]):
                if not taken[img][j]:
                    ov = _overlap(cand, g, "relationship")
                    if ov > best_iou:
                        best, best_iou = j, ov
            if best >= 0:
                taken[img][best] = True
            tp.append(best >= 0)
        aps.append(average_precision(tp, sum(len(g) for g in gts)))
    return float(np.mean(aps))


# --------------------------------------------------------------- evaluation


def recall_key(k: int, k_pred: int | str) -> str:
    return f"R@{k},k={k_pred}"


def evaluate_predictions(preds: Sequence[CompositePrediction], gts: Sequence[Sequence[RelationInstance]],
                         n_predicate: int, ks: Iterable[int] = (50, 100),
                         k_settings: Iterable[int | str] = (1, "all")) -> dict:
    """Dataset-level metrics from combined per-scene predictions.

    Recall pools hits and ground truths over all scenes.
    """
    if len(preds) != len(gts):
        raise ValueError("need one prediction per scene")
    ks = list(ks)
    out: dict = {}
    n_gt = sum(len(g) for g in gts)
    for mode in RECALL_MODES:
        block = {}
        for ksetting in k_settings:
            k_pred = n_predicate if ksetting == "all" else int(ksetting)
            ranked = [rank_predictions(p, mode, k_pred) for p in preds]
            for k in ks:
                hits = sum(recall_hits(r, g, k, mode) for r, g in zip(ranked, gts))
                block[recall_key(k, ksetting)] = hits / n_gt if n_gt else 1.0
        out[mode] = block
    ranked = [rank_predictions(p, "relationship", n_predicate) for p in preds]
    out["map_default"] = map_default(ranked, gts)
    return out


def evaluate_modes(preds: Sequence[CompositePrediction], gts, n_predicate: int, modes: Iterable[str],
                   **kw) -> dict:
    """One metric block per inference mode."""
    return {mode: evaluate_predictions([combine_inference(p, mode) for p in preds], gts, n_predicate, **kw)
            for mode in modes}


# ----------------------------------------------------------- prediction dump


def dump_predictions(preds: Sequence[CompositePrediction], path, top_k: int | None = None) -> None:
    """JSON lines, one record per (scene, query).

    Record: ``{"scene": int, "query": int, "<class head>": [[label, prob], ...],
    "<box head>": [cx, cy, w, h]}``.  Class lists are sorted by descending
    probability and truncated to ``top_k`` entries when given; the last class
    index of a head is no-object.  A header line ``{"n_classes": {...}}``
    records each head's class count.
    """
    lines = []
    if preds:
        lines.append(json.dumps({"n_classes": {n: int(preds[0].get(n).shape[-1])
                                               for n in preds[0].present() if n in CLASS_FIELDS}}))
    for s, pred in enumerate(preds):
        for q in range(pred.n_queries):
            rec: dict = {"scene": s, "query": q}
            for name in pred.present():
                v = pred.get(name)[q]
                if name in BOX_FIELDS:
                    rec[name] = [float(x) for x in v]
                else:
                    order = np.argsort(-v, kind="stable")[:top_k]
                    rec[name] = [[int(c), float(v[c])] for c in order]
            lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def load_predictions(path) -> list[CompositePrediction]:
    """Inverse of :func:`dump_predictions`; truncated probabilities read as 0."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        return []
    n_classes = json.loads(lines[0])["n_classes"]
    scenes: dict[int, list[dict]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            scenes.setdefault(int(rec["scene"]), []).append(rec)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    preds = []
    for s in sorted(scenes):
        recs = sorted(scenes[s], key=lambda r: r["query"])
        fields = {}
        for name in recs[0]:
            if name in BOX_FIELDS:
                fields[name] = np.array([r[name] for r in recs], dtype=float)
            elif name in CLASS_FIELDS:
                arr = np.zeros((len(recs), n_classes[name]))
                for i, r in enumerate(recs):
                    for c, p in r[name]:
                        arr[i, c] = p
                fields[name] = arr
        preds.append(CompositePrediction(**fields))
    return preds


def write_metrics(metrics: dict, path) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
