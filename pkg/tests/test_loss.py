import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partsum import tensor as T
from partsum.data import RelationInstance, Vocab, pad_targets
from partsum.geometry import Box
from partsum.loss import LossWeights, match_all, matched_loss, set_loss
from partsum.matching import Assignment
from partsum.tensor import ContractError, Tensor
from partsum.verify import end_to_end_case, perfect_outputs

VOCAB = Vocab(3, 2, [(0, 1, 2), (1, 0, 0)])
GT = [RelationInstance(0, Box(0.3, 0.3, 0.2, 0.2), 1, 2, Box(0.7, 0.6, 0.3, 0.4)),
      RelationInstance(1, Box(0.5, 0.4, 0.4, 0.3), 0, 0, Box(0.4, 0.7, 0.2, 0.2))]
FIELDS = dict(subject=4, object=4, predicate=3, triplet=3, subject_box=4, object_box=4, predicate_box=4,
              sum_subject=4, sum_object=4, sum_predicate=3, sum_subject_box=4, sum_object_box=4,
              sum_predicate_box=4)


def py_giou(a, b):
    """Plain-float GIoU on centre-form boxes."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / union - (hull - union) / hull


def oracle_loss(outputs, targets, sigmas, w=LossWeights()):
    """Loop-by-loop reference: query i of scene b at layer l is paired with target sigma[l][b][i]."""
    total = 0.0
    n_layers, n_scenes, m = next(iter(outputs.values())).shape[:3]
    for l in range(n_layers):
        for b in range(n_scenes):
            ts = targets[b]
            for i in range(m):
                j = sigmas[l][b][i]
                real = bool(ts.real[j])
                for name, arr in outputs.items():
                    comp = name.replace("sum_", "").replace("_box", "")
                    stream = w.sum if name.startswith("sum_") else w.part
                    v = arr[l, b, i]
                    if name.endswith("_box"):
                        if real:
                            tb = ts.boxes(comp)[j]
                            l1 = sum(abs(float(p) - float(q)) for p, q in zip(v, tb))
                            total += stream * (w.l1 * l1 + w.giou * (1 - py_giou(v, tb))) / (m * n_scenes)
                        continue
                    label = int(ts.labels(comp)[j])
                    k = len(v) - 1 if label < 0 else label
                    mx = max(v)
                    log_z = mx + math.log(sum(math.exp(x - mx) for x in v))
                    weight = 1.0 if real else w.eos
                    total += stream * w.cls * weight * (log_z - v[k]) / (m * n_scenes)
    return total


def random_outputs(rng, n_layers=2, n_scenes=2, m=4):
    out = {}
    for name, n in FIELDS.items():
        if name.endswith("_box"):
            arr = np.concatenate([rng.uniform(0.3, 0.7, (n_layers, n_scenes, m, 2)),
                                  rng.uniform(0.1, 0.5, (n_layers, n_scenes, m, 2))], -1)
        else:
            arr = rng.normal(size=(n_layers, n_scenes, m, n))
        out[name] = Tensor(arr)
    return out


def test_matches_loop_oracle():
    rng = np.random.default_rng(0)
    outputs = random_outputs(rng)
    targets = [pad_targets(GT, 4, VOCAB), pad_targets(GT[:1], 4, VOCAB)]
    assignments = match_all(outputs, targets)
    report = set_loss(outputs, targets, assignments)
    sigmas = [[a.sigma for a in row] for row in assignments]
    expected = oracle_loss({k: v.data for k, v in outputs.items()}, targets, sigmas)
    assert report.value == pytest.approx(expected, rel=1e-12)


def test_frozen_hand_value():
    # one query, one real target, zero logits and boxes at (0.5, 0.5, 0.5, 0.5)
    out = {n: Tensor(np.zeros((1, 1, 1, c)) if not n.endswith("_box") else np.full((1, 1, 1, 4), 0.5))
           for n, c in FIELDS.items()}
    targets = [pad_targets(GT[:1], 1, VOCAB)]
    report = set_loss(out, targets, [[Assignment((0,), 0.0)]])
    by_kind = {}
    for key, v in report.terms.items():
        kind = key.rsplit("/", 1)[1]
        by_kind[kind] = by_kind.get(kind, 0.0) + v
    # four heads over 4 classes, three over 3
    assert by_kind["nll"] == pytest.approx(4 * math.log(4) + 3 * math.log(3), rel=1e-14)
    # centre-form L1 of subject 1.0, object 0.6, union 0.275; two streams, weight 5
    assert by_kind["l1"] == pytest.approx(2 * 5 * (1.0 + 0.6 + 0.275), rel=1e-14)
    frozen = oracle_loss({k: v.data for k, v in out.items()}, targets, [[(0,)]])
    assert report.value == pytest.approx(frozen, rel=1e-12)
    assert frozen == pytest.approx(36.583576095908896, rel=1e-12)


def test_perfect_prediction_is_exactly_zero():
    targets = [pad_targets(GT, 2, VOCAB)]
    perfect = perfect_outputs(targets, FIELDS, n_layers=3)
    report, _ = matched_loss(perfect, targets)
    assert report.value == 0.0
    assert all(v == 0.0 for v in report.terms.values())


@pytest.mark.parametrize("m", [1, 4])
def test_all_null_uniform_gives_eos_log_classes(m):
    out = {n: Tensor(np.zeros((1, 1, m, c)) if not n.endswith("_box") else np.full((1, 1, m, 4), 0.5))
           for n, c in FIELDS.items()}
    targets = [pad_targets([], m, VOCAB)]
    report, _ = matched_loss(out, targets)
    for name, c in FIELDS.items():
        if name.endswith("_box"):
            assert report.terms[f"layer0/{name}/l1"] == 0.0
        else:
            assert report.terms[f"layer0/{name}/nll"] == pytest.approx(0.1 * math.log(c), abs=1e-15)


def test_terms_add_up_and_are_non_negative():
    rng = np.random.default_rng(1)
    outputs = random_outputs(rng)
    report, _ = matched_loss(outputs, [pad_targets(GT, 4, VOCAB), pad_targets([], 4, VOCAB)])
    assert sum(report.terms.values()) == pytest.approx(report.value, abs=1e-9)
    assert all(v >= 0 for v in report.terms.values())
    assert {k.split("/")[0] for k in report.terms} == {"layer0", "layer1"}
    assert sum(report.by_head().values()) == pytest.approx(report.value, abs=1e-9)


def test_zero_box_weights_gate_box_terms():
    rng = np.random.default_rng(2)
    report, _ = matched_loss(random_outputs(rng), [pad_targets(GT, 4, VOCAB)] * 2,
                             LossWeights(l1=0.0, giou=0.0))
    box = [v for k, v in report.terms.items() if k.endswith("/l1") or k.endswith("/giou")]
    assert box and all(v == 0.0 for v in box)


def test_gt_permutation_and_query_permutation_invariance():
    rng = np.random.default_rng(3)
    gts = GT + [RelationInstance(2, Box(0.2, 0.8, 0.2, 0.2), 1, 1, Box(0.8, 0.2, 0.2, 0.3))]
    vocab = Vocab(3, 2, sorted({g.triplet for g in gts}))
    outputs = random_outputs(rng, n_scenes=1, m=5)
    outputs["triplet"] = Tensor(rng.normal(size=(2, 1, 5, 4)))
    base, _ = matched_loss(outputs, [pad_targets(gts, 5, vocab)])
    for perm in itertools.permutations(range(3)):
        moved, _ = matched_loss(outputs, [pad_targets([gts[i] for i in perm], 5, vocab)])
        assert abs(moved.value - base.value) <= 1e-9
    qperm = rng.permutation(5)
    shuffled = {k: Tensor(v.data[:, :, qperm]) for k, v in outputs.items()}
    moved, _ = matched_loss(shuffled, [pad_targets(gts, 5, vocab)])
    assert abs(moved.value - base.value) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2))
def test_loss_non_negative_for_random_inputs(seed, n_real):
    rng = np.random.default_rng(seed)
    report, _ = matched_loss(random_outputs(rng, 1, 1, 3), [pad_targets(GT[:n_real], 3, VOCAB)])
    assert report.value >= 0 and all(v >= 0 for v in report.terms.values())


def test_contract_errors():
    rng = np.random.default_rng(4)
    outputs = random_outputs(rng)
    targets = [pad_targets(GT, 4, VOCAB)] * 2
    good = match_all(outputs, targets)
    with pytest.raises(ContractError):
        set_loss(outputs, targets, good[:1])
    with pytest.raises(ContractError):
        set_loss(outputs, targets[:1], good)
    with pytest.raises(ContractError):
        set_loss(outputs, [pad_targets(GT, 3, VOCAB)] * 2, good)
    bad = dict(outputs)
    bad["subject"] = Tensor(rng.normal(size=(3, 2, 4, 4)))
    with pytest.raises(ContractError):
        match_all(bad, targets)


def test_unknown_triplet_pays_nothing_on_triplet_head():
    out = random_outputs(np.random.default_rng(5), 1, 1, 2)
    unseen = RelationInstance(2, Box(0.5, 0.5, 0.2, 0.2), 1, 1, Box(0.3, 0.3, 0.2, 0.2))
    report, assignments = matched_loss(out, [pad_targets([unseen], 2)])
    with_vocab, _ = matched_loss(out, [pad_targets([unseen], 2, VOCAB)])
    assert unseen.triplet not in VOCAB.triplets and with_vocab.value == report.value
    q = assignments[0][0].sigma.index(0)
    others = [i for i in range(2) if i != q]
    logp = np.log(T.softmax(out["triplet"]).data[0, 0])
    expected = sum(-0.1 * logp[i, -1] for i in others) / 2
    assert report.terms["layer0/triplet/nll"] == pytest.approx(expected, rel=1e-12)


def test_end_to_end_gradient_on_toy_model():
    fn, values = end_to_end_case(np.random.default_rng(0))
    assert T.grad_check(fn, values) < 1e-4
