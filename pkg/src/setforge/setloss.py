"""Permutation-invariant distances between point sets.

Two families: Chamfer (nearest-neighbour both ways, quadratic cost) and
Hungarian (optimal one-to-one matching, cubic cost). Both sit on an
elementwise Huber base so a single outlier coordinate cannot dominate. The
discrete matching is treated as a constant during differentiation; gradients
flow through the selected pairings only.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, astensor

# Additive penalty that pushes masked entries out of every minimisation.
# Large against any realistic cost, small against float64 range.
BIG = 1e12


def huber(delta) -> Tensor:
    """Elementwise Huber penalty: quadratic within unit error, linear outside.

    Implemented as ``c*d - c^2/2`` with ``c = clip(d, -1, 1)``, which equals
    the piecewise definition exactly and differentiates to ``clip(d, -1, 1)``.
    """
    d = astensor(delta)
    c = dc.clip(d, -1.0, 1.0)
    return c * d - dc.square(c) * 0.5


def squared_error(delta) -> Tensor:
    return dc.square(astensor(delta)) * 0.5


_BASES = {"huber": huber, "squared": squared_error}


def pairwise_cost(a, b, base: str = "huber") -> Tensor:
    """Cost matrix between two point collections.

    ``a``: (..., n, d), ``b``: (..., m, d) -> (..., n, m); entry (i, j) is the
    base penalty summed over the feature dimension.
    """
    fn = _BASES[base]
    a, b = astensor(a), astensor(b)
    diff = dc.reshape(a, a.shape[:-1] + (1, a.shape[-1])) - dc.reshape(
        b, b.shape[:-2] + (1,) + b.shape[-2:]
    )
    return dc.reduce_sum(fn(diff), axis=-1)


def _masked_direction(mins: Tensor, mask, reduction: str) -> Tensor:
    if mask is None:
        if reduction == "mean":
            return dc.reduce_mean(mins, axis=-1)
        return dc.reduce_sum(mins, axis=-1)
    m = dc.constant(np.asarray(mask, dtype=np.float64))
    total = dc.reduce_sum(mins * m, axis=-1)
    if reduction == "mean":
        counts = dc.constant(np.maximum(np.sum(np.asarray(mask, float), axis=-1), 1.0))
        return total / counts
    return total


def chamfer(a, b, base: str = "huber", mask_a=None, mask_b=None,
            reduction: str = "sum") -> Tensor:
    """Symmetric nearest-neighbour loss between sets (leading batch dims ok).

    Masks mark real rows; masked-out rows neither match nor get matched.
    ``reduction='sum'`` gives the plain double sum; ``'mean'`` normalises each
    direction by its set size, which keeps values comparable across sizes.
    Empty inputs are rejected.
    """
    a, b = astensor(a), astensor(b)
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("chamfer distance of an empty set is undefined")
    C = pairwise_cost(a, b, base)
    if mask_b is not None:
        penalty = (1.0 - np.asarray(mask_b, dtype=np.float64)) * BIG
        C = C + dc.constant(penalty[..., None, :])
    fwd = dc.reduce_min(C, axis=-1)
    forward = _masked_direction(fwd, mask_a, reduction)

    if mask_a is not None:
        penalty = (1.0 - np.asarray(mask_a, dtype=np.float64)) * BIG
        C = C + dc.constant(penalty[..., :, None])
    bwd = dc.reduce_min(C, axis=-2)
    backward = _masked_direction(bwd, mask_b, reduction)
    return forward + backward


# ---------------------------------------------------------------------------
# optimal assignment


@dataclass
class CostMatrix:
    """Validated dense cost matrix for assignment solving."""

    costs: np.ndarray

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=np.float64)
        if self.costs.ndim != 2 or 0 in self.costs.shape:
            raise ValueError("cost matrix must be 2-D and non-empty")
        if not np.all(np.isfinite(self.costs)):
            raise ValueError("cost matrix must be finite")


@dataclass
class Assignment:
    """Result of an assignment solve on the original (unpadded) matrix.

    ``row_to_col`` is injective over matched rows; rows left over when there
    are more rows than columns hold -1.
    """

    row_to_col: np.ndarray
    total_cost: float


def _lapjv_square(C: np.ndarray) -> np.ndarray:
    """Jonker-Volgenant / shortest augmenting path on a square cost matrix.

    Returns col_of_row. Deterministic: rows are inserted in order and ties
    resolve to the lowest column index via argmin.
    """
    n = C.shape[0]
    u = np.zeros(n)                       # row potentials
    v = np.zeros(n + 1)                   # col potentials, last is virtual
    p = np.full(n + 1, -1, dtype=np.int64)  # col -> row, index n is virtual
    way = np.zeros(n + 1, dtype=np.int64)   # predecessor column on the path

    for i in range(n):
        p[n] = i
        j0 = n
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = np.flatnonzero(~used[:n])
            cur = C[i0, free] - u[i0] - v[free]
            improved = cur < minv[free]
            upd = free[improved]
            minv[upd] = cur[improved]
            way[upd] = j0
            k = int(np.argmin(minv[free]))
            j1 = int(free[k])
            delta = minv[j1]
            used_cols = np.flatnonzero(used)
            u[p[used_cols]] += delta
            v[used_cols] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == -1:
                break
        # augment along the alternating path back to the virtual column
        while j0 != n:
            j1 = int(way[j0])
            p[j0] = p[j1]
            j0 = j1

    col_of_row = np.full(n, -1, dtype=np.int64)
    col_of_row[p[:n]] = np.arange(n)
    return col_of_row


def assignment_solve(cost) -> Assignment:
    """Minimum-total-cost injective assignment of rows to columns.

    Rectangular matrices are padded internally to square with a constant
    exceeding the maximum entry, so padding never displaces a real match.
    """
    C = cost.costs if isinstance(cost, CostMatrix) else CostMatrix(cost).costs
    n, m = C.shape
    if n > m:
        flipped = assignment_solve(C.T)
        row_to_col = np.full(n, -1, dtype=np.int64)
        for col, row in enumerate(flipped.row_to_col):
            row_to_col[row] = col
        return Assignment(row_to_col, flipped.total_cost)
    if n < m:
        pad_val = float(np.max(C)) + 1.0 if C.size else 1.0
        C_sq = np.full((m, m), pad_val)
        C_sq[:n] = C
    else:
        C_sq = C
    col_of_row = _lapjv_square(C_sq)[:n]
    total = float(C[np.arange(n), col_of_row].sum())
    return Assignment(col_of_row, total)


def hungarian_loss(a, b, base: str = "huber") -> Tensor:
    """Optimal-matching loss between equal-size sets ``a`` and ``b`` (n, d).

    The assignment is solved on current values and then held fixed, so the
    returned scalar differentiates like a sum of per-pair base penalties.
    """
    a, b = astensor(a), astensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("hungarian_loss expects single sets shaped (n, d)")
    if a.shape[0] != b.shape[0]:
        raise ValueError(
            f"hungarian_loss needs equal sizes, got {a.shape[0]} and {b.shape[0]}"
        )
    C = pairwise_cost(a, b, base)
    match = assignment_solve(C.values)
    paired = dc.take(b, match.row_to_col, axis=0)
    return dc.reduce_sum(_BASES[base](a - paired))


def repr_loss(h, h_hat, base: str = "huber") -> Tensor:
    """Distance between an embedding and its re-encoding, summed over the
    feature axis. Leading batch dims pass through."""
    h, h_hat = astensor(h), astensor(h_hat)
    return dc.reduce_sum(_BASES[base](h - h_hat), axis=-1)


# ---------------------------------------------------------------------------
# padding and its failure mode


@dataclass
class PaddedSet:
    points: np.ndarray   # (target_size, d)
    mask: np.ndarray     # (target_size,) 1.0 for real rows
    cardinality: int


def pad_ground_truth(points, target_size: int) -> PaddedSet:
    """Zero-pad a set to a fixed size, recording which rows are real."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be (n, d)")
    n, d = pts.shape
    if target_size < n:
        raise ValueError(f"target size {target_size} below set size {n}")
    out = np.zeros((target_size, d))
    out[:n] = pts
    mask = np.zeros(target_size)
    mask[:n] = 1.0
    return PaddedSet(out, mask, n)


@dataclass
class DegeneracyReport:
    count: int
    witnesses: list  # multisets (arrays) at zero Chamfer distance


def degeneracy_count(points, pad_count: int, tol: float = 1e-12) -> DegeneracyReport:
    """Count multisets indistinguishable from a zero-padded target.

    The target is ``points`` plus ``pad_count`` zero rows. Candidates are all
    multisets of the padded size drawn from the padded target's support (the
    original points and the zero vector). A candidate is degenerate when its
    Chamfer distance to the target is exactly zero, i.e. the loss cannot see
    the difference. With one pad row only the target itself qualifies; with
    two or more, zero rows can be traded for duplicates and the count grows.

    Exhaustive enumeration: |points| is capped at 4 and pad_count at 3.
    """
    A = np.asarray(points, dtype=np.float64)
    if A.ndim != 2 or len(A) == 0:
        raise ValueError("points must be a non-empty (n, d) array")
    n, d = A.shape
    if n > 4 or not 1 <= pad_count <= 3:
        raise ValueError("degeneracy_count is exhaustive: need n <= 4, 1 <= pad <= 3")
    if np.any(np.all(A == 0.0, axis=1)):
        raise ValueError("points must not contain the zero vector")
    if len(np.unique(A, axis=0)) != n:
        raise ValueError("points must be distinct")

    alphabet = np.vstack([A, np.zeros((1, d))])
    target = np.vstack([A, np.zeros((pad_count, d))])
    size = n + pad_count

    witnesses = []
    for combo in itertools.combinations_with_replacement(range(n + 1), size):
        cand = alphabet[list(combo)]
        val = chamfer(cand, target).item()
        if val <= tol:
            witnesses.append(cand)
    return DegeneracyReport(len(witnesses), witnesses)
