"""Independent reference implementations used to check the library.

Everything here is deliberately naive: central finite differences, explicit
permutation enumeration, quadratic/cubic brute force. Slow but trustworthy.
"""

import itertools

import numpy as np


def finite_diff(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / denom


def huber_scalar(d: float) -> float:
    ad = abs(d)
    return 0.5 * d * d if ad <= 1.0 else ad - 0.5


def pair_cost(a: np.ndarray, b: np.ndarray) -> float:
    return float(sum(huber_scalar(x) for x in np.asarray(a) - np.asarray(b)))


def chamfer_brute(A, B) -> float:
    """Both-direction nearest-neighbour sum, elementwise Huber base."""
    A, B = np.asarray(A, float), np.asarray(B, float)
    fwd = sum(min(pair_cost(a, b) for b in B) for a in A)
    bwd = sum(min(pair_cost(a, b) for a in A) for b in B)
    return fwd + bwd


def assignment_brute(C: np.ndarray):
    """Exact minimum-cost assignment by enumerating all permutations.

    C must be square-ish with rows <= cols; returns (row_to_col, total).
    """
    C = np.asarray(C, dtype=np.float64)
    n, m = C.shape
    assert n <= m
    best, best_perm = np.inf, None
    for cols in itertools.permutations(range(m), n):
        total = sum(C[i, j] for i, j in enumerate(cols))
        if total < best - 1e-15:
            best, best_perm = total, cols
    return np.array(best_perm), float(best)


def hungarian_brute(A, B) -> float:
    A, B = np.asarray(A, float), np.asarray(B, float)
    assert len(A) == len(B)
    C = np.array([[pair_cost(a, b) for b in B] for a in A])
    _, total = assignment_brute(C)
    return total
