import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from partsum.attention import ConfigError
from partsum.data import DataError, Entity, Relation, Scene
from partsum.geometry import Box
from partsum.scenes import (N_GEOMETRIC_CHANNELS, PredicateRule, SceneGenConfig, check_realizable, dataset_from_json,
                            dataset_to_json, generate_dataset, load_dataset, render_tokens, save_dataset,
                            augment_scene, dihedral_scene, jitter_scene, relation_candidates,
                            spatial_relations)


def corners(b):
    return b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2


def strictly_inside(a, b):
    """Reference containment check written independently of the generator."""
    ax1, ay1, ax2, ay2 = corners(a)
    bx1, by1, bx2, by2 = corners(b)
    return bx1 <= ax1 and by1 <= ay1 and ax2 <= bx2 and ay2 <= by2 and (a.w, a.h) != (b.w, b.h)


def test_same_seed_gives_identical_json():
    cfg = SceneGenConfig(seed=3)
    a = json.dumps(dataset_to_json(generate_dataset(cfg, 30)))
    b = json.dumps(dataset_to_json(generate_dataset(cfg, 30)))
    assert a == b
    assert a != json.dumps(dataset_to_json(generate_dataset(SceneGenConfig(seed=4), 30)))


def test_prefix_stability():
    cfg = SceneGenConfig(seed=1)
    assert generate_dataset(cfg, 5).scenes == generate_dataset(cfg, 12).scenes[:5]


def test_two_entities_one_relation():
    ds = generate_dataset(SceneGenConfig(entities_per_scene=(2, 2), relations_per_scene=(1, 1)), 40)
    for sc in ds.scenes:
        assert len(sc.entities) == 2 and len(sc.relations) == 1


def test_default_ranges_hold():
    cfg = SceneGenConfig()
    for sc in generate_dataset(cfg, 100).scenes:
        assert 3 <= len(sc.entities) <= 6
        assert 1 <= len(sc.relations) <= 5
        assert len(set(sc.relations)) == len(sc.relations)
        for e in sc.entities:
            x1, y1, x2, y2 = corners(e.box)
            assert 0 <= x1 <= x2 <= 1 + 1e-12 and 0 <= y1 <= y2 <= 1 + 1e-12


def test_inside_rule_replay():
    """Every annotated nested pair carries 'in', and the generator produces such pairs."""
    ds = generate_dataset(SceneGenConfig(seed=0), 100)
    in_idx = ds.predicate_labels.index("in")
    carried = 0
    for sc in ds.scenes:
        for r in sc.relations:
            a, b = sc.entities[r.subject].box, sc.entities[r.object].box
            if r.predicate == in_idx:
                assert strictly_inside(a, b)
                carried += 1
        # an annotated nested pair always carries "in" as well
        nested = {(r.subject, r.object) for r in sc.relations
                  if strictly_inside(sc.entities[r.subject].box, sc.entities[r.object].box)}
        for s, o in nested:
            assert Relation(s, in_idx, o) in sc.relations
        # a nested pair left out must be farther apart than every annotated pair
        for s, a in enumerate(sc.entities):
            for o, b in enumerate(sc.entities):
                if s != o and strictly_inside(a.box, b.box) and Relation(s, in_idx, o) not in sc.relations:
                    far = np.hypot(a.box.cx - b.box.cx, a.box.cy - b.box.cy)
                    assert all(np.hypot(sc.entities[r.subject].box.cx - sc.entities[r.object].box.cx,
                                        sc.entities[r.subject].box.cy - sc.entities[r.object].box.cy) <= far
                               for r in sc.relations)
    assert carried > 0


def test_multiple_predicates_between_one_pair_occur():
    ds = generate_dataset(SceneGenConfig(), 100)
    assert any(len({(r.subject, r.object) for r in sc.relations}) < len(sc.relations) for sc in ds.scenes)


def test_label_conditioned_rules_take_precedence():
    cfg = SceneGenConfig(n_predicate_labels=7)
    a, b = Entity(0, Box(0.2, 0.5, 0.1, 0.1)), Entity(1, Box(0.8, 0.5, 0.1, 0.1))
    assert cfg.predicates(a, b) == [5]  # "left-of" specialised for subject label 0
    assert cfg.predicates(Entity(2, a.box), b) == [0]


def test_config_errors():
    for bad in (dict(entities_per_scene=(2, 2), relations_per_scene=(2, 3)),
                dict(entities_per_scene=(1, 3)), dict(relations_per_scene=(0, 2)),
                dict(min_size=0.5, max_size=0.2), dict(n_predicate_labels=3),
                dict(rules=(PredicateRule(0, "left-of"),))):
        with pytest.raises(ConfigError):
            SceneGenConfig(**bad)
    with pytest.raises(ConfigError):
        generate_dataset(SceneGenConfig(), 0)


@st.composite
def boxes(draw):
    w, h = draw(st.floats(0.05, 0.5)), draw(st.floats(0.05, 0.5))
    return Box(draw(st.floats(w / 2, 1 - w / 2)), draw(st.floats(h / 2, 1 - h / 2)), w, h)


@settings(max_examples=200, deadline=None)
@given(boxes(), boxes())
def test_rule_table_is_total_over_pairs(a, b):
    assume(tuple(a) != tuple(b))
    cfg = SceneGenConfig()
    assert cfg.predicates(Entity(0, a), Entity(1, b)) or cfg.predicates(Entity(1, b), Entity(0, a))
    assert ("inside" in spatial_relations(a, b)) == strictly_inside(a, b)


def test_every_annotation_is_recoverable_from_geometry():
    cfg = SceneGenConfig(seed=9, n_predicate_labels=8)
    for sc in generate_dataset(cfg, 50).scenes:
        for r in sc.relations:
            assert r.predicate in cfg.predicates(sc.entities[r.subject], sc.entities[r.object])


# ---------------------------------------------------------------- rendering


def test_render_empty_scene_is_zero():
    tok = render_tokens(Scene([]), grid=4, n_entity_labels=3)
    assert tok.shape == (16, 3 + N_GEOMETRIC_CHANNELS) and not tok.any()


def test_full_image_entity_fills_its_channel():
    tok = render_tokens(Scene([Entity(3, Box(0.5, 0.5, 1.0, 1.0))]), grid=8, n_entity_labels=6)
    assert np.all(tok[:, 3] == 1.0)
    assert np.all(tok[:, [0, 1, 2, 4, 5]] == 0.0)


def test_quarter_box_occupancy_and_edges():
    # box over the top-left 2x2 cells of a 4x4 grid, then half a cell more to the right
    tok = render_tokens(Scene([Entity(0, Box.from_corners(0.0, 0.0, 0.625, 0.5))]), grid=4,
                        n_entity_labels=1).reshape(4, 4, -1)
    np.testing.assert_allclose(tok[:2, :, 0], [[1, 1, 0.5, 0]] * 2)
    assert not tok[2:, :, 0].any()
    left, right, top, bottom = tok[..., 1], tok[..., 2], tok[..., 3], tok[..., 4]
    assert left[:2, 0].all() and left.sum() == 2
    assert right[:2, 2].all() and right.sum() == 2
    assert top[0, :3].all() and top.sum() == 3
    assert bottom[1, :3].all() and bottom.sum() == 3  # y2 = 0.5 sits on the boundary of row 1
    assert tok[0, 2, 6] == 0.625


def test_render_ignores_relation_order():
    sc = generate_dataset(SceneGenConfig(seed=2), 1).scenes[0]
    flipped = Scene(sc.entities, list(reversed(sc.relations)))
    np.testing.assert_array_equal(render_tokens(sc), render_tokens(flipped))
    with pytest.raises(ConfigError):
        render_tokens(sc, grid=1)


# ----------------------------------------------------------------------- io


def test_roundtrip(tmp_path):
    ds = generate_dataset(SceneGenConfig(seed=5), 20)
    path = tmp_path / "d.json"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.scenes == ds.scenes
    assert back.entity_labels == ds.entity_labels and back.predicate_labels == ds.predicate_labels
    save_dataset(back, tmp_path / "e.json")
    assert (tmp_path / "e.json").read_bytes() == path.read_bytes()


def test_empty_dataset_rejected(tmp_path):
    ds = generate_dataset(SceneGenConfig(), 1)
    ds.scenes = []
    with pytest.raises(DataError):
        save_dataset(ds, tmp_path / "x.json")
    with pytest.raises(DataError, match="no scenes"):
        dataset_from_json({"format": "partsum-scenes", "version": 1, "entity_labels": ["a"],
                           "predicate_labels": ["p"], "scenes": []})


FIXTURE = """{
 "format": "partsum-scenes",
 "version": 1,
 "entity_labels": ["cup", "table"],
 "predicate_labels": ["left of", "above", "below", "in", "overlaps"],
 "scenes": [
  {"entities": [{"label": 0, "box": [0.5, 0.3, 0.2, 0.2]},
                {"label": 1, "box": [0.5, 0.7, 0.8, 0.4]}],
   "relations": [{"subject": 0, "predicate": 1, "object": 1}]}
 ]
}
"""


def test_hand_written_fixture(tmp_path):
    path = tmp_path / "fixture.json"
    path.write_text(FIXTURE)
    ds = load_dataset(path)
    assert ds.entity_labels == ["cup", "table"] and ds.n_predicate == 5
    assert ds.scenes == [Scene([Entity(0, Box(0.5, 0.3, 0.2, 0.2)), Entity(1, Box(0.5, 0.7, 0.8, 0.4))],
                               [Relation(0, 1, 1)])]
    inst = ds.scenes[0].instances()[0]
    assert inst.triplet == (0, 1, 1)


@pytest.mark.parametrize("edit, message", [
    (lambda t: t.replace('"predicate": 1', '"predicate": 9'), "scene 0, relation 0"),
    (lambda t: t.replace('"object": 1', '"object": 4'), "entity index out of range"),
    (lambda t: t.replace('"label": 1', '"label": 2'), "scene 0, entity 1"),
    (lambda t: t.replace('"version": 1', '"version": 7'), "unsupported version"),
    (lambda t: t.replace('"box": [0.5, 0.3, 0.2, 0.2]', '"box": "x"'), "scene 0"),
    (lambda t: t.replace('"relations": [{"subject": 0, "predicate": 1, "object": 1}]', '"relations": []'),
     "no relations"),
    (lambda t: t.replace("]}\n ]", "]\n ]"), "line"),
])
def test_malformed_files_name_their_location(tmp_path, edit, message):
    path = tmp_path / "bad.json"
    path.write_text(edit(FIXTURE))
    with pytest.raises(DataError, match=message):
        load_dataset(path)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_jitter_keeps_boxes_in_frame_and_annotations_valid(scene_seed, jitter_seed):
    cfg = SceneGenConfig()
    scene = generate_dataset(SceneGenConfig(seed=scene_seed), 1).scenes[0]
    moved = jitter_scene(scene, np.random.default_rng(jitter_seed))
    assert moved.relations == scene.relations
    for e in moved.entities:
        x1, y1, x2, y2 = corners(e.box)
        assert -1e-12 <= x1 and -1e-12 <= y1 and x2 <= 1 + 1e-12 and y2 <= 1 + 1e-12
    check_realizable(moved, cfg)
    n = len(scene.entities)
    for a in range(n):
        for b in range(n):
            if a != b:
                assert spatial_relations(moved.entities[a].box, moved.entities[b].box) == \
                    spatial_relations(scene.entities[a].box, scene.entities[b].box)

    def centre_distances(s):
        c = np.array([[e.box.cx, e.box.cy] for e in s.entities])
        return np.linalg.norm(c[:, None] - c[None], axis=-1)
    d0, d1 = centre_distances(scene), centre_distances(moved)
    off = ~np.eye(n, dtype=bool)
    ratio = d1[off] / d0[off]
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-9)


def test_jitter_is_seeded_and_moves_the_scene():
    scene = generate_dataset(SceneGenConfig(seed=4), 1).scenes[0]
    a = jitter_scene(scene, np.random.default_rng(1))
    assert a == jitter_scene(scene, np.random.default_rng(1))
    assert a.entities != scene.entities
    assert not np.array_equal(render_tokens(a, 8, 6), render_tokens(scene, 8, 6))
    assert jitter_scene(Scene([]), np.random.default_rng(0)) == Scene([])


def relation_table(scene):
    n = len(scene.entities)
    return {(a, b): spatial_relations(scene.entities[a].box, scene.entities[b].box)
            for a in range(n) for b in range(n) if a != b}


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_dihedral_symmetries_map_relations_as_expected(seed):
    scene = generate_dataset(SceneGenConfig(seed=seed), 1).scenes[0]
    base = relation_table(scene)
    mirrored = relation_table(dihedral_scene(scene, 1))
    transposed = relation_table(dihedral_scene(scene, 4))
    flipped = relation_table(dihedral_scene(scene, 2))
    for (a, b), rels in base.items():
        # mirroring x reverses left-of and keeps everything else
        assert ("left-of" in mirrored[(b, a)]) == ("left-of" in rels)
        assert mirrored[(a, b)] - {"left-of"} == rels - {"left-of"}
        # mirroring y turns above into below
        assert ("above" in flipped[(a, b)]) == ("below" in rels)
        # swapping axes exchanges left-of and above
        assert ("above" in transposed[(a, b)]) == ("left-of" in rels)
        assert ("left-of" in transposed[(a, b)]) == ("above" in rels)
        assert {"inside", "overlapping"} & transposed[(a, b)] == {"inside", "overlapping"} & rels


@pytest.mark.parametrize("k", [0, 1, 2, 3, 4, 7])
def test_reflections_are_involutions(k):
    scene = generate_dataset(SceneGenConfig(seed=5), 1).scenes[0]
    twice = dihedral_scene(dihedral_scene(scene, k), k)
    for e, f in zip(scene.entities, twice.entities):
        np.testing.assert_allclose(f.box, e.box, atol=1e-15)
        assert e.label == f.label


def test_dihedral_images_are_distinct():
    scene = generate_dataset(SceneGenConfig(seed=6), 1).scenes[0]
    images = {tuple(np.round(np.concatenate([e.box for e in dihedral_scene(scene, k).entities]), 12))
              for k in range(8)}
    assert len(images) == 8


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_augmented_scenes_are_annotated_by_the_rule_table(scene_seed, aug_seed):
    cfg = SceneGenConfig(n_predicate_labels=7)
    scene = generate_dataset(replace(cfg, seed=scene_seed), 1).scenes[0]
    aug = augment_scene(scene, np.random.default_rng(aug_seed), cfg)
    check_realizable(aug, cfg)
    assert [e.label for e in aug.entities] == [e.label for e in scene.entities]
    # closest pairs first: no unannotated candidate is strictly closer than an annotated one
    cands = relation_candidates(aug.entities, cfg)
    assert len(aug.relations) == min(len(scene.relations), len(cands))
    chosen = {(r.subject, r.predicate, r.object) for r in aug.relations}
    if chosen:
        worst = max(d for d, a, p, b in cands if (a, p, b) in chosen)
        assert all(d >= worst for d, a, p, b in cands if (a, p, b) not in chosen)


def test_augmentation_is_seeded():
    cfg = SceneGenConfig()
    scene = generate_dataset(cfg, 1).scenes[0]
    assert augment_scene(scene, np.random.default_rng(3), cfg) == augment_scene(scene, np.random.default_rng(3), cfg)
