"""Composite bipartite matching between predictions and padded targets."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .data import NULL, CapacityError, DataError, TargetSet
from .prediction import BOX_FIELDS, CLASS_FIELDS, CompositePrediction, component_of
from .tensor import ContractError


class MatchingError(ContractError):
    """Invalid cost matrix or targets outside a head's label space."""


@dataclass(frozen=True)
class CostWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass
class CostMatrix:
    """``values[i, j]``: cost of assigning prediction i to (padded) target j."""

    values: np.ndarray
    terms: dict[str, np.ndarray]


@dataclass(frozen=True)
class Assignment:
    """``sigma[i]`` is the target index assigned to prediction i."""

    sigma: tuple[int, ...]
    total_cost: float

    def inverse(self) -> tuple[int, ...]:
        inv = [0] * len(self.sigma)
        for i, j in enumerate(self.sigma):
            inv[j] = i
        return tuple(inv)


def total_cost(cost: np.ndarray, sigma) -> float:
    # sequential left-to-right sum; brute force accumulates in the same order
    s = 0.0
    for i, j in enumerate(sigma):
        s += float(cost[i, j])
    return s


# ------------------------------------------------------------------ solvers


def _check_finite(cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix has non-finite entries")
    return cost


def linear_assignment(cost) -> tuple[list[int], list[float], list[float]]:
    """Shortest-augmenting-path Hungarian method for ``n <= m`` rows/columns.

    Returns ``(col_of_row, u, v)`` where ``u``/``v`` are dual potentials with
    ``u[i] + v[j] <= cost[i, j]``, tight on every assigned pair.  O(n^2 m).
    """
    cost = _check_finite(cost)
    n, m = cost.shape
    if n > m:
        raise MatchingError(f"more rows than columns ({n} > {m}); transpose first")
    rows = cost.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    owner = [0] * (m + 1)  # owner[j]: 1-based row assigned to column j, 0 = free
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            row = rows[i0 - 1]
            ui = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = [0] * n
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _lexicographic_min(tight: np.ndarray, match: list[int]) -> list[int]:
    """Smallest permutation (lexicographically) among perfect matchings of ``tight``.

    ``match`` is any perfect matching inside ``tight``.  Rows are fixed in
    order; row i takes the smallest column for which the rows after it can
    still be completed, found by an alternating-path search.
    """
    n = len(match)
    match = list(match)
    row_of = [0] * n
    for r, c in enumerate(match):
        row_of[c] = r
    adj = [np.flatnonzero(tight[r]).tolist() for r in range(n)]

    for i in range(n):
        for j in adj[i]:
            if j >= match[i]:
                break
            # give column j to row i; its holder must reach the column i frees
            target = match[i]
            holder = row_of[j]
            if holder < i:
                continue
            path = _augment(adj, match, row_of, holder, target, i, {j})
            if path is None:
                continue
            for r, c in path:
                match[r] = c
                row_of[c] = r
            match[i] = j
            row_of[j] = i
            break
    return match


def _augment(adj, match, row_of, start, target, locked_upto, banned):
    """Alternating path re-seating ``start`` so that ``target`` gets used.

    Only rows after ``locked_upto`` move.  Returns the (row, new column) moves.
    """
    # iterative DFS over rows; state = (row, path so far)
    stack = [(start, [])]
    visited_cols = set(banned)
    while stack:
        row, path = stack.pop()
        for c in reversed(adj[row]):
            if c in visited_cols:
                continue
            if c == target:
                return path + [(row, c)]
            holder = row_of[c]
            if holder <= locked_upto:
                continue
            visited_cols.add(c)
            stack.append((holder, path + [(row, c)]))
    return None


def hungarian(cost) -> Assignment:
    """Globally optimal assignment of a square cost matrix.

    Among several optima the lexicographically smallest permutation is
    returned, so results do not depend on solver internals.
    """
    cost = _check_finite(cost)
    n, m = cost.shape
    if n != m:
        raise MatchingError(f"hungarian needs a square matrix, got {cost.shape}")
    if n == 0:
        return Assignment((), 0.0)
    match, u, v = linear_assignment(cost)
    reduced = cost - np.asarray(u)[:, None] - np.asarray(v)[None, :]
    tol = 1e-10 * max(1.0, float(np.abs(cost).max()))
    tight = reduced <= tol
    for r, c in enumerate(match):
        tight[r, c] = True
    match = _lexicographic_min(tight, match)
    return Assignment(tuple(match), total_cost(cost, match))


_PERMS: dict[int, np.ndarray] = {}


def brute_force_assignment(cost) -> Assignment:
    """Exhaustive minimum over all M! permutations (M <= 8).

    Ties resolve to the lexicographically first permutation.
    """
    cost = _check_finite(cost)
    n, m = cost.shape
    if n != m:
        raise MatchingError(f"brute force needs a square matrix, got {cost.shape}")
    if n > 8:
        raise CapacityError(f"brute force is limited to M <= 8, got {n}")
    if n == 0:
        return Assignment((), 0.0)
    perms = _PERMS.get(n)
    if perms is None:
        perms = _PERMS[n] = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    sums = np.zeros(len(perms))
    for i in range(n):
        sums = sums + cost[i, perms[:, i]]
    best = perms[int(np.argmin(sums))]
    sigma = tuple(int(j) for j in best)
    return Assignment(sigma, total_cost(cost, sigma))


# ------------------------------------------------------------- matching cost


def matching_cost(pred: CompositePrediction, targets: TargetSet,
                  weights: CostWeights = CostWeights()) -> CostMatrix:
    """Composite matching cost for one scene and one decoder layer.

    Every classification head present in ``pred`` contributes
    ``-weights.cls * p(true class)``; every box head contributes
    ``weights.l1 * L1 + weights.giou * (1 - GIoU)``.  Columns of no-object
    targets are zero.
    """
    m = len(targets)
    n_pred = pred.n_queries
    real = targets.real
    values = np.zeros((n_pred, m))
    terms: dict[str, np.ndarray] = {}
    for name in CLASS_FIELDS:
        probs = pred.get(name)
        if probs is None:
            continue
        labels = targets.labels(component_of(name))
        use = real & (labels != NULL)
        if np.any(labels[use] >= probs.shape[-1] - 1) or np.any(labels[use] < 0):
            raise DataError(f"{name}: target label outside the head's classes")
        term = np.zeros((n_pred, m))
        term[:, use] = -weights.cls * probs[:, labels[use]]
        terms[name] = term
        values += term
    for name in BOX_FIELDS:
        boxes = pred.get(name)
        if boxes is None:
            continue
        tb = targets.boxes(component_of(name))
        term = np.zeros((n_pred, m))
        if real.any():
            term[:, real] = (weights.l1 * geometry.pairwise_l1(boxes, tb[real])
                             + weights.giou * (1.0 - geometry.pairwise_giou(boxes, tb[real])))
        terms[name] = term
        values += term
    return CostMatrix(values, terms)


def match(pred: CompositePrediction, targets: TargetSet,
          weights: CostWeights = CostWeights()) -> Assignment:
    """Assignment for one scene using the fast rectangular solve.

    Real targets are assigned optimally; remaining predictions take the padded
    targets in increasing order.  The total cost equals the square optimum.
    """
    cost = matching_cost(pred, targets, weights)
    real_cols = np.flatnonzero(targets.real)
    m = len(targets)
    sigma = [-1] * pred.n_queries
    if len(real_cols):
        col_of_row, _, _ = linear_assignment(cost.values[:, real_cols].T)
        for t, i in enumerate(col_of_row):
            sigma[i] = int(real_cols[t])
    pad = iter(np.flatnonzero(~targets.real).tolist())
    for i in range(len(sigma)):
        if sigma[i] < 0:
            sigma[i] = next(pad)
    assert len(sigma) == m
    return Assignment(tuple(sigma), total_cost(cost.values, sigma))
