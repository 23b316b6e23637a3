"""Annotation structures shared by generation, matching, loss and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, union_box


class DataError(ValueError):
    """Malformed or out-of-vocabulary annotation data."""


@dataclass(frozen=True)
class Entity:
    label: int
    box: Box


@dataclass(frozen=True)
class RelationInstance:
    """A ground-truth (subject, predicate, object) triplet with boxes."""

    subject: int
    subject_box: Box
    predicate: int
    object: int
    object_box: Box

    @property
    def triplet(self) -> tuple[int, int, int]:
        return (self.subject, self.predicate, self.object)

    @property
    def union_box(self) -> Box:
        return Box(*union_box(self.subject_box, self.object_box))


@dataclass(frozen=True)
class Relation:
    """Relation between two entities of a scene, by entity index."""

    subject: int
    predicate: int
    object: int


@dataclass
class Scene:
    entities: list[Entity]
    relations: list[Relation] = field(default_factory=list)

    def instances(self) -> list[RelationInstance]:
        out = []
        for r in self.relations:
            s, o = self.entities[r.subject], self.entities[r.object]
            out.append(RelationInstance(s.label, s.box, r.predicate, o.label, o.box))
        return out


@dataclass
class Vocab:
    """Label spaces.  Every class head appends a no-object class at the end."""

    n_entity: int
    n_predicate: int
    triplets: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.triplets = [tuple(int(v) for v in t) for t in self.triplets]
        if len(set(self.triplets)) != len(self.triplets):
            raise DataError("triplet vocabulary has duplicates")
        self._index = {t: i for i, t in enumerate(self.triplets)}

    @property
    def n_triplet(self) -> int:
        return len(self.triplets)

    def triplet_index(self, triplet, default: int | None = None) -> int:
        """Index of ``triplet``; ``default`` if unseen, or DataError when no default is given."""
        try:
            return self._index[tuple(triplet)]
        except KeyError:
            if default is not None:
                return default
            raise DataError(f"triplet {tuple(triplet)} is not in the vocabulary") from None

    def check(self, inst: RelationInstance) -> None:
        if not (0 <= inst.subject < self.n_entity and 0 <= inst.object < self.n_entity):
            raise DataError(f"entity label outside vocabulary in {inst.triplet}")
        if not 0 <= inst.predicate < self.n_predicate:
            raise DataError(f"predicate label outside vocabulary in {inst.triplet}")

    @classmethod
    def from_scenes(cls, scenes, n_entity: int, n_predicate: int) -> "Vocab":
        seen = sorted({inst.triplet for sc in scenes for inst in sc.instances()})
        return cls(n_entity, n_predicate, seen)

    def to_json(self) -> dict:
        return {"n_entity": self.n_entity, "n_predicate": self.n_predicate,
                "triplets": [list(t) for t in self.triplets]}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(int(obj["n_entity"]), int(obj["n_predicate"]), [tuple(t) for t in obj["triplets"]])


NULL = -1  # label of a padded (no-object) target component


@dataclass
class TargetSet:
    """Targets of one scene padded with no-object entries up to M.

    Label arrays hold ``NULL`` at padded positions; box arrays hold a dummy
    full-image box there (masked out of every box term).
    """

    subject: np.ndarray
    predicate: np.ndarray
    object: np.ndarray
    triplet: np.ndarray
    subject_box: np.ndarray
    object_box: np.ndarray
    union_box: np.ndarray
    real: np.ndarray

    @property
    def n_real(self) -> int:
        return int(self.real.sum())

    def __len__(self) -> int:
        return len(self.real)

    def labels(self, component: str) -> np.ndarray:
        return getattr(self, component)

    def boxes(self, component: str) -> np.ndarray:
        return {"subject": self.subject_box, "object": self.object_box,
                "predicate": self.union_box}[component]


class CapacityError(ValueError):
    pass


def pad_targets(targets, m: int, vocab: Vocab | None = None) -> TargetSet:
    """Pad ``targets`` (RelationInstances) with no-object relations up to ``m``.

    A triplet missing from ``vocab`` keeps its component labels but gets no
    triplet label, so it is matched and scored on every other head.
    """
    targets = list(targets)
    n = len(targets)
    if n > m:
        raise CapacityError(f"{n} ground-truth relations exceed {m} queries; use more queries")
    labels = np.full((4, m), NULL, dtype=np.int64)
    dummy = np.array([0.5, 0.5, 1.0, 1.0])
    boxes = np.tile(dummy, (3, m, 1))
    for i, t in enumerate(targets):
        if vocab is not None:
            vocab.check(t)
        spo = vocab.triplet_index(t.triplet, NULL) if vocab is not None and vocab.n_triplet else NULL
        labels[:, i] = (t.subject, t.predicate, t.object, spo)
        boxes[0, i] = t.subject_box
        boxes[1, i] = t.object_box
        boxes[2, i] = union_box(t.subject_box, t.object_box)
    real = np.zeros(m, dtype=bool)
    real[:n] = True
    return TargetSet(labels[0], labels[1], labels[2], labels[3], boxes[0], boxes[1], boxes[2], real)
