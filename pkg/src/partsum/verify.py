"""Self-checks: gradient suite, solver-vs-oracle sweep, metric and loss fixtures.

Every check returns a record ``{"name", "op", "passed", "value", "threshold"}``;
:func:`run_verification` collects them into one JSON-serialisable report.
"""
from __future__ import annotations

import itertools
import time
from typing import Callable

import numpy as np

from . import geometry
from . import tensor as T
from .attention import (AttentionConfig, CrossAttentionBlock, FFNBlock, MultiHeadAttention,
                        SelfAttentionBlock)
from .data import RelationInstance, TargetSet, Vocab, pad_targets
from .decoder import AttentionInteraction, DecoderConfig, FactorizedSelfAttention, PartSumInteraction
from .evaluation import RankedTriplet, map_default, recall_at_k
from .geometry import Box
from .heads import PartHeads, SumHeads
from .loss import match_all, set_loss
from .matching import brute_force_assignment, hungarian
from .model import ModelConfig, PSTModel
from .nn import substituted
from .prediction import component_of

GRAD_TOL = 1e-4


def _boxes(rng, shape) -> np.ndarray:
    """Center-form boxes well inside the unit square (no clamp, no coincident edges)."""
    c = rng.uniform(0.3, 0.7, (*shape, 2))
    s = rng.uniform(0.05, 0.5, (*shape, 2))
    return np.concatenate([c, s], axis=-1)


def _away_from_zero(rng, shape) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.1, x + np.sign(x) * 0.2 + 0.2 * (x == 0), x)


def _module_case(module_fn) -> Callable:
    """Check a block jointly in its inputs and all of its parameters."""
    def build(rng):
        module, call, inputs = module_fn(rng)
        params = module.parameters()
        names = list(params)
        values = [params[n].data.copy() for n in names]
        with T.no_grad():
            shape = call(*[T.Tensor(x) for x in inputs]).shape
        w = rng.normal(size=shape)

        def fn(*ts):
            xs, ps = ts[:len(inputs)], ts[len(inputs):]
            with substituted(module, dict(zip(names, ps))):
                return T.tsum(T.mul(call(*xs), w))
        return fn, list(inputs) + values
    return build


def _elementwise_cases() -> dict[str, Callable]:
    def unary(op, gen=lambda rng: rng.normal(size=(3, 4))):
        def build(rng):
            x = gen(rng)
            w = rng.normal(size=op(T.Tensor(x)).shape)
            return (lambda a: T.tsum(T.mul(op(a), w))), [x]
        return build

    def binary(op, ga, gb):
        def build(rng):
            a, b = ga(rng), gb(rng)
            w = rng.normal(size=op(T.Tensor(a), T.Tensor(b)).shape)
            return (lambda x, y: T.tsum(T.mul(op(x, y), w))), [a, b]
        return build

    normal = lambda shape: (lambda rng: rng.normal(size=shape))
    positive = lambda shape: (lambda rng: rng.uniform(0.5, 2.0, size=shape))
    return {
        "add": binary(T.add, normal((3, 4)), normal((4,))),
        "sub": binary(T.sub, normal((3, 4)), normal((3, 1))),
        "mul": binary(T.mul, normal((3, 4)), normal((3, 4))),
        "div": binary(T.div, normal((3, 4)), positive((3, 4))),
        "scale": unary(lambda a: T.scale(a, -2.5)),
        "matmul": binary(T.matmul, normal((2, 5, 7)), normal((7, 3))),
        "relu": unary(T.relu, lambda rng: _away_from_zero(rng, (3, 4))),
        "sigmoid": unary(T.sigmoid),
        "exp": unary(T.exp),
        "log": unary(T.log, positive((3, 4))),
        "abs": unary(T.tabs, lambda rng: _away_from_zero(rng, (3, 4))),
        "sum": unary(lambda a: T.tsum(a, axis=0)),
        "mean": unary(lambda a: T.mean(a, axis=-1)),
        "transpose_last": unary(T.transpose_last, normal((2, 3, 4))),
        "swapaxes": unary(lambda a: T.swapaxes(a, 0, 2), normal((2, 3, 4))),
        "reshape": unary(lambda a: T.reshape(a, (6, 2)), normal((3, 4))),
        "getitem": unary(lambda a: a[1:, ::2]),
        "slice_last": unary(lambda a: T.slice_last(a, 1, 3)),
        "concat": binary(lambda a, b: T.concat([a, b], axis=-1), normal((3, 2)), normal((3, 4))),
        "stack": binary(lambda a, b: T.stack([a, b], axis=1), normal((3, 4)), normal((3, 4))),
        "gather_rows": unary(lambda a: T.gather_rows(a, [2, 0, 2])),
        "pick": unary(lambda a: T.pick(a, np.array([3, 0, 1]))),
        "softmax": unary(T.softmax, normal((3, 5))),
        "softmax_masked": unary(lambda a: T.softmax(a, np.array([True, False, True, True, False])), normal((3, 5))),
        "softmax_dot": lambda rng: ((lambda x: T.tsum(T.mul(T.softmax(x), x))), [rng.normal(size=8)]),
        "log_softmax": unary(T.log_softmax, normal((3, 5))),
        "layer_norm": lambda rng: ((lambda x, g, b: T.tsum(T.mul(T.layer_norm(x, g, b), W_LN))),
                                   [rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)]),
        "giou": binary(geometry.giou_t, lambda rng: _boxes(rng, (5,)), lambda rng: _boxes(rng, (5,))),
        "l1_box": binary(geometry.l1_t, lambda rng: _boxes(rng, (5,)), lambda rng: _boxes(rng, (5,)) + 0.01),
    }


W_LN = np.random.default_rng(11).normal(size=(3, 6))

DIM, HEADS = 8, 2


def _block_cases() -> dict[str, Callable]:
    def attn(rng):
        m = MultiHeadAttention(DIM, HEADS, rng)
        return m, (lambda q, k: m(q, k, k)), [rng.normal(size=(3, DIM)), rng.normal(size=(4, DIM))]

    def sa(rng):
        b = SelfAttentionBlock(DIM, HEADS, rng)
        return b, (lambda x, p: b(x, p)), [rng.normal(size=(3, DIM)), rng.normal(size=(3, DIM))]

    def ca(rng):
        b = CrossAttentionBlock(DIM, HEADS, rng)
        return b, (lambda x, mem, mp: b(x, mem, None, mp)), [rng.normal(size=(2, DIM)),
                                                               rng.normal(size=(4, DIM)),
                                                               rng.normal(size=(4, DIM))]

    def ffn(rng):
        b = FFNBlock(DIM, 12, rng)
        return b, (lambda x: b(x)), [rng.normal(size=(3, DIM))]

    def fsa(rng):
        b = FactorizedSelfAttention(DIM, HEADS, rng)
        return b, (lambda x, p: b(x, p)), [rng.normal(size=(4, 3, DIM)), rng.normal(size=(4, 3, DIM))]

    def inter(rng):
        b = PartSumInteraction(DIM)
        for n in b.parameters().values():
            n.data = n.data + rng.normal(scale=0.3, size=n.shape)
        return b, (lambda p, s: T.concat([T.reshape(o, (-1,)) for o in b(p, s)], axis=0)), \
            [rng.normal(size=(2, 3, DIM)), rng.normal(size=(2, DIM))]

    def attn_inter(rng):
        b = AttentionInteraction(DIM, HEADS, rng)
        pp, sp = T.Tensor(rng.normal(size=(2, 3, DIM))), T.Tensor(rng.normal(size=(2, DIM)))
        return b, (lambda p, s: T.concat([T.reshape(o, (-1,)) for o in b(p, s, pp, sp)], axis=0)), \
            [rng.normal(size=(2, 3, DIM)), rng.normal(size=(2, DIM))]

    vocab = Vocab(3, 2, [(0, 1, 2), (1, 0, 0)])

    def part_heads(rng):
        h = PartHeads(vocab, DIM, rng)
        return h, (lambda x: T.concat([T.reshape(v, (-1,)) for v in h(x).values()], axis=0)), \
            [rng.normal(size=(2, 3, DIM))]

    def sum_heads(rng):
        h = SumHeads(vocab, DIM, rng)
        return h, (lambda x: T.concat([T.reshape(v, (-1,)) for v in h(x).values()], axis=0)), \
            [rng.normal(size=(2, DIM))]

    cases = {"multi_head_attention": attn, "self_attention_block": sa, "cross_attention_block": ca,
             "ffn_block": ffn, "factorized_self_attention": fsa, "part_sum_interaction": inter,
             "attention_interaction": attn_inter, "part_heads": part_heads, "sum_heads": sum_heads}
    return {k: _module_case(v) for k, v in cases.items()}


# ------------------------------------------------------------- loss fixtures


def toy_model(variant: str = "part-and-sum", m: int = 2, seed: int = 0,
              vocab: Vocab | None = None) -> tuple[PSTModel, Vocab]:
    vocab = vocab or Vocab(3, 2, [(0, 1, 2)])
    cfg = ModelConfig(AttentionConfig(model_dim=4, n_heads=2, ffn_dim=4, n_encoder_layers=1),
                      DecoderConfig(variant, n_layers=2, n_queries=m), grid=2)
    return PSTModel(cfg, vocab, 5, np.random.default_rng(seed)), vocab


def toy_instance(rng) -> tuple[np.ndarray, list[RelationInstance]]:
    tokens = rng.normal(size=(4, 5))
    sb, ob = Box(0.35, 0.4, 0.3, 0.2), Box(0.6, 0.55, 0.25, 0.4)
    return tokens, [RelationInstance(0, sb, 1, 2, ob)]


def end_to_end_case(rng, variant: str = "part-and-sum"):
    """Scalar set loss of a 2-query, 1-target toy model, matching held fixed.

    Parameters are jittered away from their initialisation: zero biases behind
    dead ReLU units sit exactly on the kink, where a central difference reports
    the mean of the one-sided slopes instead of the subgradient.
    """
    model, vocab = toy_model(variant, 2, int(rng.integers(1 << 30)))
    for p in model.parameters().values():
        p.data = p.data + 0.1 * rng.normal(size=p.data.shape)
    tokens, gt = toy_instance(rng)
    targets = [pad_targets(gt, 2, vocab)]
    outputs, _ = model(tokens)
    assignments = match_all(outputs, targets)
    names = list(model.parameters())
    values = [p.data.copy() for p in model.parameters().values()]

    def fn(*ps):
        with substituted(model, dict(zip(names, ps))):
            out, _ = model(tokens)
            return set_loss(out, targets, assignments).total
    return fn, values


def perfect_outputs(targets: list[TargetSet], fields: dict[str, int], n_layers: int = 1,
                    margin: float = 1e3) -> dict[str, T.Tensor]:
    """Head outputs that put all mass on the target classes and hit every box."""
    out = {}
    for name, n_cls in fields.items():
        comp = component_of(name)
        if name.endswith("_box"):
            arr = np.stack([ts.boxes(comp) for ts in targets])
        else:
            labels = np.stack([ts.labels(comp) for ts in targets])
            labels = np.where(labels < 0, n_cls - 1, labels)
            arr = np.full((*labels.shape, n_cls), -margin)
            np.put_along_axis(arr, labels[..., None], margin, axis=-1)
        out[name] = T.Tensor(np.broadcast_to(arr, (n_layers, *arr.shape)).copy())
    return out


# --------------------------------------------------------------- metric fixtures


def recall_fixture() -> float:
    """Two ground truths: one hit at rank 1, the other localised at IoU 0.4."""
    a, b = Box.from_corners(0.0, 0.0, 0.2, 0.2), Box.from_corners(0.5, 0.5, 0.7, 0.7)
    c, d = Box.from_corners(0.1, 0.6, 0.3, 0.8), Box.from_corners(0.6, 0.0, 0.9, 0.3)
    gt = [RelationInstance(0, a, 1, 2, b), RelationInstance(1, c, 0, 0, d)]
    # c shifted right by 0.2 * 3/7 has IoU exactly 0.4 with c
    shift = 0.2 * 3 / 7
    c_off = Box.from_corners(0.1 + shift, 0.6, 0.3 + shift, 0.8)
    ranked = [RankedTriplet(0.9, 0, 1, 2, (a, b), 0), RankedTriplet(0.8, 1, 0, 0, (c_off, d), 1)]
    return recall_at_k(ranked, gt, 50, "relationship")


def ap_fixture() -> float:
    """One category, two ground truths, one true positive ranked above one false positive."""
    a, b = Box.from_corners(0.0, 0.0, 0.2, 0.2), Box.from_corners(0.5, 0.5, 0.7, 0.7)
    c, d = Box.from_corners(0.1, 0.6, 0.3, 0.8), Box.from_corners(0.6, 0.0, 0.9, 0.3)
    far = Box.from_corners(0.8, 0.8, 1.0, 1.0)
    gt = [[RelationInstance(0, a, 1, 2, b), RelationInstance(0, c, 1, 2, d)]]
    ranked = [[RankedTriplet(0.9, 0, 1, 2, (a, b), 0), RankedTriplet(0.5, 0, 1, 2, (far, far), 1)]]
    return map_default(ranked, gt)


# ------------------------------------------------------------------- runner


def _record(name: str, op: str, passed: bool, value, threshold) -> dict:
    return {"name": name, "op": op, "passed": bool(passed), "value": value, "threshold": threshold}


def gradient_checks(instances: int = 20, seed: int = 0, end_to_end: bool = True) -> list[dict]:
    out = []
    cases = {**_elementwise_cases(), **_block_cases()}
    for op, build in cases.items():
        worst = 0.0
        for i in range(instances):
            fn, inputs = build(np.random.default_rng([seed, i, len(op)]))
            worst = max(worst, T.grad_check(fn, inputs))
        out.append(_record(f"grad_check:{op}", op, worst < GRAD_TOL, worst, GRAD_TOL))
    if end_to_end:
        worst = 0.0
        for i in range(max(1, instances // 3)):
            fn, inputs = end_to_end_case(np.random.default_rng([seed, i, 99]))
            worst = max(worst, T.grad_check(fn, inputs))
        out.append(_record("grad_check:set_loss_end_to_end", "set_loss", worst < GRAD_TOL, worst, GRAD_TOL))
    return out


def assignment_sweep(per_size: int = 200, sizes=range(2, 8), seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for m in sizes:
        for i in range(per_size):
            cost = rng.normal(size=(m, m)) if i % 2 else rng.integers(0, 4, size=(m, m)).astype(float)
            h, b = hungarian(cost), brute_force_assignment(cost)
            if h.sigma != b.sigma or h.total_cost != b.total_cost:
                mismatches += 1
    return _record("hungarian_vs_brute_force", "hungarian", mismatches == 0, mismatches, 0)


def loss_checks(seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    tokens = rng.normal(size=(4, 5))
    gt = [RelationInstance(0, Box(*_boxes(rng, ())), 1, 2, Box(*_boxes(rng, ()))),
          RelationInstance(1, Box(*_boxes(rng, ())), 0, 0, Box(*_boxes(rng, ()))),
          RelationInstance(2, Box(*_boxes(rng, ())), 1, 1, Box(*_boxes(rng, ())))]
    vocab = Vocab(3, 2, sorted({g.triplet for g in gt}))
    model, _ = toy_model("part-and-sum", 4, seed, vocab)
    with T.no_grad():
        outputs, _ = model(tokens)

    def loss_for(instances, outs):
        targets = [pad_targets(instances, 4, vocab)]
        return set_loss(outs, targets, match_all(outs, targets)).value

    base = loss_for(gt, outputs)
    worst_gt = max(abs(loss_for([gt[i] for i in p], outputs) - base) for p in itertools.permutations(range(3)))
    perm = np.array([2, 0, 3, 1])
    permuted = {k: T.Tensor(v.data[:, :, perm]) for k, v in outputs.items()}
    query_diff = abs(loss_for(gt, permuted) - base)

    targets = [pad_targets(gt, 4, vocab)]
    fields = {n: v.shape[-1] for n, v in outputs.items()}
    perfect = perfect_outputs(targets, fields, n_layers=2)
    zero = set_loss(perfect, targets, match_all(perfect, targets)).value
    return [
        _record("loss_gt_permutation", "set_loss", worst_gt <= 1e-9, worst_gt, 1e-9),
        _record("loss_query_permutation", "set_loss", query_diff <= 1e-9, query_diff, 1e-9),
        _record("loss_perfect_prediction", "set_loss", zero == 0.0, zero, 0.0),
    ]


def metric_checks() -> list[dict]:
    r, ap = recall_fixture(), ap_fixture()
    return [_record("recall_fixture", "recall_at_k", r == 0.5, r, 0.5),
            _record("map_fixture", "map_default", ap == 0.5, ap, 0.5)]


def run_verification(seed: int = 0, instances: int = 20, sweep: int = 200, end_to_end: bool = True) -> dict:
    t0 = time.perf_counter()
    checks = gradient_checks(instances, seed, end_to_end)
    checks.append(assignment_sweep(sweep, seed=seed))
    checks += loss_checks(seed)
    checks += metric_checks()
    failed = sorted({c["op"] for c in checks if not c["passed"]})
    return {"passed": not failed, "failed_ops": failed, "checks": checks,
            "seconds": round(time.perf_counter() - t0, 3)}
