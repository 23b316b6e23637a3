"""Procedural relational scenes, their token rendering, and JSON persistence.

Predicates follow from geometry through a rule table, so every annotated
triplet can be recovered from the boxes and labels alone.  Annotated relations
are the ``R`` candidate triplets whose subject and object centres are closest,
which keeps the annotation a deterministic function of the scene.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import ConfigError
from .data import DataError, Entity, Relation, Scene
from .geometry import Box, to_corners

SPATIAL_RELATIONS = ("left-of", "above", "below", "inside", "overlapping")
DEFAULT_PREDICATE_NAMES = ("left of", "above", "below", "in", "overlaps")
N_GEOMETRIC_CHANNELS = 8
FORMAT = "partsum-scenes"
VERSION = 1


def spatial_relations(a: Box, b: Box) -> set[str]:
    """Spatial relations holding for the ordered pair (a, b)."""
    ax1, ay1, ax2, ay2 = to_corners(a)
    bx1, by1, bx2, by2 = to_corners(b)
    out = set()
    if ax2 <= bx1:
        out.add("left-of")
    if ay2 <= by1:
        out.add("above")
    if ay1 >= by2:
        out.add("below")
    a_in_b = ax1 >= bx1 and ay1 >= by1 and ax2 <= bx2 and ay2 <= by2
    b_in_a = bx1 >= ax1 and by1 >= ay1 and bx2 <= ax2 and by2 <= ay2
    if a_in_b and not b_in_a:
        out.add("inside")
    inter = max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))
    if inter > 0 and not a_in_b and not b_in_a:
        out.add("overlapping")
    return out


@dataclass(frozen=True)
class PredicateRule:
    """Assign ``predicate`` when ``relation`` holds and the labels match.

    ``None`` label sets match anything.  Earlier rules win, so put
    label-conditioned rules before the unconditional ones.
    """

    predicate: int
    relation: str
    subject_labels: tuple[int, ...] | None = None
    object_labels: tuple[int, ...] | None = None

    def matches(self, relation: str, s_label: int, o_label: int) -> bool:
        return (relation == self.relation
                and (self.subject_labels is None or s_label in self.subject_labels)
                and (self.object_labels is None or o_label in self.object_labels))


def default_rules(n_predicate_labels: int, n_entity_labels: int) -> tuple[PredicateRule, ...]:
    """The five spatial predicates; extra predicates specialise them by subject label."""
    if n_predicate_labels < len(SPATIAL_RELATIONS):
        raise ConfigError(f"need at least {len(SPATIAL_RELATIONS)} predicate labels, got {n_predicate_labels}")
    extra = []
    for k in range(len(SPATIAL_RELATIONS), n_predicate_labels):
        j = k - len(SPATIAL_RELATIONS)
        rel = SPATIAL_RELATIONS[j % len(SPATIAL_RELATIONS)]
        label = (j // len(SPATIAL_RELATIONS)) % n_entity_labels
        extra.append(PredicateRule(k, rel, subject_labels=(label,)))
    base = [PredicateRule(i, r) for i, r in enumerate(SPATIAL_RELATIONS)]
    return tuple(extra + base)


@dataclass(frozen=True)
class SceneGenConfig:
    n_entity_labels: int = 6
    n_predicate_labels: int = 5
    entities_per_scene: tuple[int, int] = (3, 6)
    relations_per_scene: tuple[int, int] = (2, 5)
    min_size: float = 0.15
    max_size: float = 0.45
    nest_prob: float = 0.25
    seed: int = 0
    rules: tuple[PredicateRule, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "entities_per_scene", tuple(int(v) for v in self.entities_per_scene))
        object.__setattr__(self, "relations_per_scene", tuple(int(v) for v in self.relations_per_scene))
        if self.rules is None:
            object.__setattr__(self, "rules", default_rules(self.n_predicate_labels, self.n_entity_labels))
        else:
            object.__setattr__(self, "rules", tuple(
                r if isinstance(r, PredicateRule) else PredicateRule(
                    int(r["predicate"]), r["relation"],
                    None if r.get("subject_labels") is None else tuple(r["subject_labels"]),
                    None if r.get("object_labels") is None else tuple(r["object_labels"]))
                for r in self.rules))
        self.validate()

    def validate(self) -> None:
        e_lo, e_hi = self.entities_per_scene
        r_lo, r_hi = self.relations_per_scene
        if self.n_entity_labels < 1 or self.n_predicate_labels < 1:
            raise ConfigError("label counts must be positive")
        if not 2 <= e_lo <= e_hi:
            raise ConfigError(f"entities_per_scene must satisfy 2 <= lo <= hi, got {self.entities_per_scene}")
        if not 1 <= r_lo <= r_hi:
            raise ConfigError(f"relations_per_scene must satisfy 1 <= lo <= hi, got {self.relations_per_scene}")
        if r_lo > e_lo * (e_lo - 1) // 2:
            raise ConfigError(f"{r_lo} relations cannot be guaranteed with {e_lo} entities "
                              f"({e_lo * (e_lo - 1) // 2} pairs)")
        if not 0 < self.min_size <= self.max_size <= 1:
            raise ConfigError("box sizes must satisfy 0 < min_size <= max_size <= 1")
        for rule in self.rules:
            if rule.relation not in SPATIAL_RELATIONS:
                raise ConfigError(f"unknown spatial relation {rule.relation!r}")
            if not 0 <= rule.predicate < self.n_predicate_labels:
                raise ConfigError(f"rule predicate {rule.predicate} outside the predicate vocabulary")
        for rel in SPATIAL_RELATIONS:
            if not any(r.relation == rel and r.subject_labels is None and r.object_labels is None
                       for r in self.rules):
                raise ConfigError(f"rule table is not total: no unconditional rule for {rel!r}")

    def predicates(self, a: Entity, b: Entity) -> list[int]:
        """Predicates the rule table assigns to the ordered entity pair (a, b)."""
        out = set()
        for rel in spatial_relations(a.box, b.box):
            for rule in self.rules:
                if rule.matches(rel, a.label, b.label):
                    out.add(rule.predicate)
                    break
        return sorted(out)

    @classmethod
    def from_json(cls, obj: dict) -> "SceneGenConfig":
        return cls(**obj)

    def to_json(self) -> dict:
        d = asdict(self)
        d["entities_per_scene"] = list(self.entities_per_scene)
        d["relations_per_scene"] = list(self.relations_per_scene)
        d["rules"] = [{"predicate": r.predicate, "relation": r.relation,
                       "subject_labels": None if r.subject_labels is None else list(r.subject_labels),
                       "object_labels": None if r.object_labels is None else list(r.object_labels)}
                      for r in self.rules]
        return d


@dataclass
class Dataset:
    scenes: list[Scene]
    entity_labels: list[str]
    predicate_labels: list[str]
    generator: dict | None = None

    @property
    def n_entity(self) -> int:
        return len(self.entity_labels)

    @property
    def n_predicate(self) -> int:
        return len(self.predicate_labels)

    def __len__(self) -> int:
        return len(self.scenes)


# --------------------------------------------------------------- generation


def _random_box(rng: np.random.Generator, cfg: SceneGenConfig) -> Box:
    w, h = rng.uniform(cfg.min_size, cfg.max_size, size=2)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return Box(float(cx), float(cy), float(w), float(h))


def _nested_box(rng: np.random.Generator, parent: Box) -> Box:
    w, h = parent.w * rng.uniform(0.35, 0.7), parent.h * rng.uniform(0.35, 0.7)
    x1, y1, x2, y2 = to_corners(parent)
    cx = rng.uniform(x1 + w / 2, x2 - w / 2)
    cy = rng.uniform(y1 + h / 2, y2 - h / 2)
    return Box(float(cx), float(cy), float(w), float(h))


def generate_scene(rng: np.random.Generator, cfg: SceneGenConfig) -> Scene:
    n_ent = int(rng.integers(cfg.entities_per_scene[0], cfg.entities_per_scene[1] + 1))
    entities: list[Entity] = []
    for k in range(n_ent):
        label = int(rng.integers(cfg.n_entity_labels))
        parents = [e for e in entities if min(e.box.w, e.box.h) >= 2 * cfg.min_size]
        if parents and rng.random() < cfg.nest_prob:
            box = _nested_box(rng, parents[int(rng.integers(len(parents)))].box)
        else:
            box = _random_box(rng, cfg)
        entities.append(Entity(label, box))

    candidates = relation_candidates(entities, cfg)
    hi = min(cfg.relations_per_scene[1], len(candidates))
    n_rel = int(rng.integers(cfg.relations_per_scene[0], hi + 1))
    relations = [Relation(a, p, b) for _, a, p, b in candidates[:n_rel]]
    scene = Scene(entities, relations)
    check_realizable(scene, cfg)
    return scene


def relation_candidates(entities: Sequence[Entity], cfg: SceneGenConfig) -> list[tuple[float, int, int, int]]:
    """Every rule-implied ``(distance, subject, predicate, object)``, closest pairs first."""
    out = []
    for a, ea in enumerate(entities):
        for b, eb in enumerate(entities):
            if a == b:
                continue
            dist = float(np.hypot(ea.box.cx - eb.box.cx, ea.box.cy - eb.box.cy))
            out.extend((dist, a, p, b) for p in cfg.predicates(ea, eb))
    out.sort()
    return out


def check_realizable(scene: Scene, cfg: SceneGenConfig) -> None:
    for r in scene.relations:
        if r.predicate not in cfg.predicates(scene.entities[r.subject], scene.entities[r.object]):
            raise DataError(f"relation {r} is not implied by the rule table")


def generate_dataset(config: SceneGenConfig, n_scenes: int, entity_labels=None,
                     predicate_labels=None) -> Dataset:
    """``n_scenes`` scenes; scene i uses its own seed derived from (seed, i)."""
    if n_scenes < 1:
        raise ConfigError("n_scenes must be positive")
    scenes = [generate_scene(np.random.default_rng([config.seed, i]), config) for i in range(n_scenes)]
    if entity_labels is None:
        entity_labels = [f"entity{i}" for i in range(config.n_entity_labels)]
    if predicate_labels is None:
        predicate_labels = list(DEFAULT_PREDICATE_NAMES) + [
            f"predicate{i}" for i in range(len(DEFAULT_PREDICATE_NAMES), config.n_predicate_labels)]
    return Dataset(scenes, list(entity_labels), list(predicate_labels)[:config.n_predicate_labels],
                   config.to_json())


def jitter_scene(scene: Scene, rng: np.random.Generator, scale: tuple[float, float] = (0.75, 1.25)) -> Scene:
    """Rescale the scene uniformly and shift it, keeping every box inside the image.

    Spatial relations and centre-distance order are invariant under a positive
    uniform scale plus a translation, so the relations are kept as they are.
    """
    if not scene.entities:
        return scene
    corners = np.array([to_corners(e.box) for e in scene.entities])
    x1, y1 = corners[:, 0].min(), corners[:, 1].min()
    width, height = corners[:, 2].max() - x1, corners[:, 3].max() - y1
    hi = min(scale[1], 1.0 / max(width, height, 1e-12))
    s = float(rng.uniform(min(scale[0], hi), hi))
    nx1 = float(rng.uniform(0.0, max(0.0, 1.0 - s * width)))
    ny1 = float(rng.uniform(0.0, max(0.0, 1.0 - s * height)))
    entities = [Entity(e.label, Box((e.box.cx - x1) * s + nx1, (e.box.cy - y1) * s + ny1, e.box.w * s, e.box.h * s))
                for e in scene.entities]
    return Scene(entities, list(scene.relations))


def dihedral_scene(scene: Scene, k: int) -> Scene:
    """Entities under symmetry ``k`` of the unit square (bit 0 mirrors x, bit 1 mirrors y,
    bit 2 swaps the axes); relations are dropped because they may not survive."""
    entities = []
    for e in scene.entities:
        cx, cy, w, h = e.box
        if k & 1:
            cx = 1.0 - cx
        if k & 2:
            cy = 1.0 - cy
        if k & 4:
            cx, cy, w, h = cy, cx, h, w
        entities.append(Entity(e.label, Box(cx, cy, w, h)))
    return Scene(entities, [])


def augment_scene(scene: Scene, rng: np.random.Generator, cfg: SceneGenConfig) -> Scene:
    """A random symmetry and rescale-and-shift of ``scene``, annotated afresh.

    The relations are the closest rule-implied triplets of the moved entities,
    as many as the original scene has (fewer if the moved scene has fewer).
    """
    moved = jitter_scene(dihedral_scene(scene, int(rng.integers(8))), rng)
    candidates = relation_candidates(moved.entities, cfg)[:len(scene.relations)]
    return Scene(moved.entities, [Relation(a, p, b) for _, a, p, b in candidates])


# ---------------------------------------------------------------- rendering


def n_features(n_entity_labels: int) -> int:
    return n_entity_labels + N_GEOMETRIC_CHANNELS


def render_tokens(scene: Scene, grid: int = 8, n_entity_labels: int | None = None) -> np.ndarray:
    """Grid-cell feature tokens ``(grid*grid, n_entity_labels + 8)``, row-major cells.

    Channels: per-label occupancy fraction of the cell (capped at 1), then
    left/right/top/bottom edge indicators and the matching edge coordinates
    (mean over edges falling in the cell).
    """
    if grid < 2:
        raise ConfigError("grid must be at least 2")
    if n_entity_labels is None:
        n_entity_labels = 1 + max((e.label for e in scene.entities), default=-1)
    c = n_entity_labels
    out = np.zeros((grid, grid, c + N_GEOMETRIC_CHANNELS))
    edge_sum = np.zeros((grid, grid, 4))
    edge_cnt = np.zeros((grid, grid, 4))
    lo = np.arange(grid) / grid
    hi = (np.arange(grid) + 1) / grid
    for ent in scene.entities:
        x1, y1, x2, y2 = to_corners(ent.box)
        ox = np.clip(np.minimum(hi, x2) - np.maximum(lo, x1), 0, None) * grid
        oy = np.clip(np.minimum(hi, y2) - np.maximum(lo, y1), 0, None) * grid
        out[:, :, ent.label] += oy[:, None] * ox[None, :]
        rows = oy > 0
        cols = ox > 0
        for k, (coord, along_x, upper) in enumerate(((x1, True, False), (x2, True, True),
                                                      (y1, False, False), (y2, False, True))):
            cell = min(int(coord * grid), grid - 1)
            if upper and coord * grid == int(coord * grid) and cell > 0:
                cell -= 1  # a right/bottom edge on a cell boundary belongs to the cell before it
            if along_x:
                edge_sum[rows, cell, k] += coord
                edge_cnt[rows, cell, k] += 1
            else:
                edge_sum[cell, cols, k] += coord
                edge_cnt[cell, cols, k] += 1
    out[:, :, :c] = np.minimum(out[:, :, :c], 1.0)
    has = edge_cnt > 0
    out[:, :, c:c + 4] = has
    out[:, :, c + 4:] = np.where(has, edge_sum / np.maximum(edge_cnt, 1), 0.0)
    return out.reshape(grid * grid, -1)


# ----------------------------------------------------------------------- io


def dataset_to_json(ds: Dataset) -> dict:
    if not ds.scenes:
        raise DataError("refusing to write an empty dataset")
    return {
        "format": FORMAT,
        "version": VERSION,
        "entity_labels": list(ds.entity_labels),
        "predicate_labels": list(ds.predicate_labels),
        "generator": ds.generator,
        "scenes": [
            {"entities": [{"label": e.label, "box": list(e.box)} for e in sc.entities],
             "relations": [{"subject": r.subject, "predicate": r.predicate, "object": r.object}
                           for r in sc.relations]}
            for sc in ds.scenes],
    }


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_json(ds), indent=1) + "\n")


def _fail(where: str, msg: str):
    raise DataError(f"{where}: {msg}")


def dataset_from_json(obj, source: str = "<json>") -> Dataset:
    if not isinstance(obj, dict) or obj.get("format") != FORMAT:
        _fail(source, f"not a {FORMAT} document")
    if obj.get("version") != VERSION:
        _fail(source, f"unsupported version {obj.get('version')!r}")
    try:
        ent_names = [str(s) for s in obj["entity_labels"]]
        pred_names = [str(s) for s in obj["predicate_labels"]]
        raw_scenes = obj["scenes"]
    except (KeyError, TypeError) as exc:
        _fail(source, f"missing header field {exc}")
    if not raw_scenes:
        _fail(source, "dataset has no scenes")
    scenes = []
    for i, raw in enumerate(raw_scenes):
        where = f"{source}: scene {i}"
        try:
            entities = [Entity(int(e["label"]), Box(*(float(v) for v in e["box"])))
                        for e in raw["entities"]]
            relations = [Relation(int(r["subject"]), int(r["predicate"]), int(r["object"]))
                         for r in raw["relations"]]
        except (KeyError, TypeError, ValueError) as exc:
            _fail(where, f"malformed record ({exc!r})")
        for j, e in enumerate(entities):
            if not 0 <= e.label < len(ent_names):
                _fail(f"{where}, entity {j}", f"label {e.label} outside {len(ent_names)} entity labels")
            if e.box.w < 0 or e.box.h < 0:
                _fail(f"{where}, entity {j}", "negative box extent")
        if not relations:
            _fail(where, "scene has no relations")
        for j, r in enumerate(relations):
            if not (0 <= r.subject < len(entities) and 0 <= r.object < len(entities)):
                _fail(f"{where}, relation {j}", "entity index out of range")
            if not 0 <= r.predicate < len(pred_names):
                _fail(f"{where}, relation {j}", f"predicate {r.predicate} outside vocabulary")
        scenes.append(Scene(entities, relations))
    return Dataset(scenes, ent_names, pred_names, obj.get("generator"))


def load_dataset(path) -> Dataset:
    path = Path(path)
    text = path.read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return dataset_from_json(obj, str(path))


def tokens_for(scenes: Sequence[Scene], grid: int, n_entity_labels: int) -> np.ndarray:
    return np.stack([render_tokens(s, grid, n_entity_labels) for s in scenes])
