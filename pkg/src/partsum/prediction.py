"""Per-query composite predictions as plain arrays."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

PART_CLASS_FIELDS = ("subject", "predicate", "object", "triplet")
SUM_CLASS_FIELDS = ("sum_subject", "sum_predicate", "sum_object")
PART_BOX_FIELDS = ("subject_box", "object_box", "predicate_box")
SUM_BOX_FIELDS = ("sum_subject_box", "sum_object_box", "sum_predicate_box")
CLASS_FIELDS = PART_CLASS_FIELDS + SUM_CLASS_FIELDS
BOX_FIELDS = PART_BOX_FIELDS + SUM_BOX_FIELDS


def component_of(name: str) -> str:
    """'sum_subject_box' -> 'subject', 'triplet' -> 'triplet'."""
    if name.startswith("sum_"):
        name = name[4:]
    if name.endswith("_box"):
        name = name[:-4]
    return name


@dataclass
class CompositePrediction:
    """Class distributions (last index = no-object) and center-form boxes.

    Arrays are ``(M, C)`` / ``(M, 4)`` for one scene; leading batch or layer
    axes are allowed and removed with :meth:`index`.  Heads a decoder
    variant does not have are ``None``.
    """

    subject: np.ndarray | None = None
    predicate: np.ndarray | None = None
    object: np.ndarray | None = None
    triplet: np.ndarray | None = None
    subject_box: np.ndarray | None = None
    object_box: np.ndarray | None = None
    predicate_box: np.ndarray | None = None
    sum_subject: np.ndarray | None = None
    sum_predicate: np.ndarray | None = None
    sum_object: np.ndarray | None = None
    sum_subject_box: np.ndarray | None = None
    sum_object_box: np.ndarray | None = None
    sum_predicate_box: np.ndarray | None = None

    def get(self, name: str):
        return getattr(self, name)

    def present(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name) is not None]

    @property
    def n_queries(self) -> int:
        for name in self.present():
            return getattr(self, name).shape[-2]
        return 0

    def index(self, *idx) -> "CompositePrediction":
        return CompositePrediction(**{n: getattr(self, n)[idx] for n in self.present()})

    def permute(self, perm) -> "CompositePrediction":
        perm = np.asarray(perm)
        return CompositePrediction(**{n: getattr(self, n)[..., perm, :] for n in self.present()})

    def has_part(self) -> bool:
        return self.subject is not None

    def has_sum(self) -> bool:
        return self.sum_subject is not None
