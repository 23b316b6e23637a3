"""Axis-aligned box algebra.

Boxes are stored center-normalized as ``(cx, cy, w, h)`` in the unit square.
All array functions accept ``(..., 4)`` inputs and broadcast over leading axes.
Corner form ``(x1, y1, x2, y2)`` is clamped to [0, 1].
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        return tuple(float(v) for v in to_corners(np.asarray(self)))

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.corners()
        return (x2 - x1) * (y2 - y1)


def to_corners(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    return np.clip(out, 0.0, 1.0)


def from_corners(corners) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    x1, y1, x2, y2 = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def _areas(c: np.ndarray) -> np.ndarray:
    return (c[..., 2] - c[..., 0]) * (c[..., 3] - c[..., 1])


def _overlap(ca: np.ndarray, cb: np.ndarray):
    iw = np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0])
    ih = np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = _areas(ca) + _areas(cb) - inter
    return inter, union


def iou(a, b) -> np.ndarray:
    """Intersection over union; 0 where the union has zero area."""
    ca, cb = to_corners(a), to_corners(b)
    inter, union = _overlap(ca, cb)
    safe = np.where(union > 0, union, 1.0)
    return np.where(union > 0, inter / safe, 0.0)


def giou(a, b) -> np.ndarray:
    """Generalized IoU in [-1, 1]: IoU minus the enclosure slack fraction."""
    ca, cb = to_corners(a), to_corners(b)
    inter, union = _overlap(ca, cb)
    ew = np.maximum(ca[..., 2], cb[..., 2]) - np.minimum(ca[..., 0], cb[..., 0])
    eh = np.maximum(ca[..., 3], cb[..., 3]) - np.minimum(ca[..., 1], cb[..., 1])
    encl = ew * eh
    iou_ = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    slack = np.where(encl > 0, (encl - union) / np.where(encl > 0, encl, 1.0), 0.0)
    return iou_ - slack


def pairwise_iou(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return iou(a[:, None, :], b[None, :, :])


def pairwise_giou(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return giou(a[:, None, :], b[None, :, :])


def union_box(a, b) -> np.ndarray:
    """Tightest box containing both inputs, in center form."""
    ca, cb = to_corners(a), to_corners(b)
    out = np.concatenate([np.minimum(ca[..., :2], cb[..., :2]),
                          np.maximum(ca[..., 2:], cb[..., 2:])], axis=-1)
    return from_corners(out)


def l1_box(a, b) -> np.ndarray:
    """Sum of absolute coordinate differences in center form."""
    return np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).sum(axis=-1)


def pairwise_l1(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=-1)


# ------------------------------------------------------- differentiable giou


def _corners_raw(b: np.ndarray) -> np.ndarray:
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def _giou_forward(a: np.ndarray, b: np.ndarray):
    ca = np.clip(_corners_raw(a), 0.0, 1.0)
    cb = np.clip(_corners_raw(b), 0.0, 1.0)
    ax1, ay1, ax2, ay2 = np.moveaxis(ca, -1, 0)
    bx1, by1, bx2, by2 = np.moveaxis(cb, -1, 0)
    iw_raw = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    ih_raw = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    iw, ih = np.maximum(iw_raw, 0.0), np.maximum(ih_raw, 0.0)
    inter = iw * ih
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    ew = np.maximum(ax2, bx2) - np.minimum(ax1, bx1)
    eh = np.maximum(ay2, by2) - np.minimum(ay1, by1)
    encl = ew * eh
    up = union > 0
    ep = encl > 0
    su = np.where(up, union, 1.0)
    se = np.where(ep, encl, 1.0)
    out = np.where(up, inter / su, 0.0) - np.where(ep, (encl - union) / se, 0.0)
    cache = dict(ca=ca, cb=cb, iw=iw, ih=ih, iw_raw=iw_raw, ih_raw=ih_raw, inter=inter,
                 union=union, encl=encl, ew=ew, eh=eh, up=up, ep=ep, su=su, se=se)
    return out, cache


def _giou_backward(cache: dict, g: np.ndarray):
    """Gradients of giou w.r.t. both center-form inputs (straight-through clamp)."""
    ca, cb = cache["ca"], cache["cb"]
    inter, su, se = cache["inter"], cache["su"], cache["se"]
    up, ep = cache["up"], cache["ep"]
    # giou = inter/union - 1 + union/encl
    d_inter = np.where(up, 1.0 / su + inter / su ** 2, 0.0) - np.where(ep, 1.0 / se, 0.0)
    d_union_area = np.where(up, -inter / su ** 2, 0.0) + np.where(ep, 1.0 / se, 0.0)
    d_encl = np.where(ep, -cache["union"] / se ** 2, 0.0)
    d_inter, d_union_area, d_encl = d_inter * g, d_union_area * g, d_encl * g

    ax1, ay1, ax2, ay2 = np.moveaxis(ca, -1, 0)
    bx1, by1, bx2, by2 = np.moveaxis(cb, -1, 0)
    da = np.zeros_like(ca)
    db = np.zeros_like(cb)

    # box areas
    da[..., 0] -= d_union_area * (ay2 - ay1)
    da[..., 2] += d_union_area * (ay2 - ay1)
    da[..., 1] -= d_union_area * (ax2 - ax1)
    da[..., 3] += d_union_area * (ax2 - ax1)
    db[..., 0] -= d_union_area * (by2 - by1)
    db[..., 2] += d_union_area * (by2 - by1)
    db[..., 1] -= d_union_area * (bx2 - bx1)
    db[..., 3] += d_union_area * (bx2 - bx1)

    # intersection
    d_iw = d_inter * cache["ih"] * (cache["iw_raw"] > 0)
    d_ih = d_inter * cache["iw"] * (cache["ih_raw"] > 0)
    for k_lo, k_hi, d in ((0, 2, d_iw), (1, 3, d_ih)):
        a_hi_wins = ca[..., k_hi] <= cb[..., k_hi]
        da[..., k_hi] += np.where(a_hi_wins, d, 0.0)
        db[..., k_hi] += np.where(a_hi_wins, 0.0, d)
        a_lo_wins = ca[..., k_lo] >= cb[..., k_lo]
        da[..., k_lo] -= np.where(a_lo_wins, d, 0.0)
        db[..., k_lo] -= np.where(a_lo_wins, 0.0, d)

    # enclosure
    d_ew = d_encl * cache["eh"]
    d_eh = d_encl * cache["ew"]
    for k_lo, k_hi, d in ((0, 2, d_ew), (1, 3, d_eh)):
        a_hi_wins = ca[..., k_hi] >= cb[..., k_hi]
        da[..., k_hi] += np.where(a_hi_wins, d, 0.0)
        db[..., k_hi] += np.where(a_hi_wins, 0.0, d)
        a_lo_wins = ca[..., k_lo] <= cb[..., k_lo]
        da[..., k_lo] -= np.where(a_lo_wins, d, 0.0)
        db[..., k_lo] -= np.where(a_lo_wins, 0.0, d)

    return _corner_grad_to_center(da), _corner_grad_to_center(db)


def _corner_grad_to_center(dc: np.ndarray) -> np.ndarray:
    dx1, dy1, dx2, dy2 = np.moveaxis(dc, -1, 0)
    return np.stack([dx1 + dx2, dy1 + dy2, (dx2 - dx1) / 2, (dy2 - dy1) / 2], axis=-1)


def giou_t(a, b) -> Tensor:
    """Differentiable generalized IoU of center-form boxes, shape ``(...)``."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    out, cache = _giou_forward(a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga, gb = _giou_backward(cache, g)
        return T._unbroadcast(ga, sa), T._unbroadcast(gb, sb)

    return T._record(out, (a, b), backward, "giou")


def l1_t(a, b) -> Tensor:
    """Differentiable L1 box distance, summed over the 4 coordinates."""
    return T.tsum(T.tabs(T.sub(a, b)), axis=-1)
