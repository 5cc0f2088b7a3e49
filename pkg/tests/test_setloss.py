"""Set losses and assignment checked against exhaustive references."""

import numpy as np
import pytest

import setforge.diffcore as dc
import setforge.setloss as sl
from setforge.diffcore import Tensor

from oracles import (assignment_brute, chamfer_brute, finite_diff,
                     huber_scalar, hungarian_brute, rel_err)

rng = np.random.default_rng(5151)


# ---------------------------------------------------------------------------
# huber base


def test_huber_matches_piecewise():
    d = np.linspace(-3, 3, 41)
    expect = np.array([huber_scalar(x) for x in d])
    got = sl.huber(Tensor(d)).values
    assert np.max(np.abs(got - expect)) < 1e-12


def test_huber_gradient_is_clipped_delta():
    d = np.array([-2.5, -1.0, -0.3, 0.0, 0.7, 1.0, 4.0])
    x = Tensor(d, requires_grad=True)
    g = dc.grad(dc.reduce_sum(sl.huber(x)), [x])[0].values
    assert np.allclose(g, np.clip(d, -1, 1))


def test_huber_continuous_at_knee():
    lo = sl.huber(Tensor([1.0 - 1e-9])).item()
    hi = sl.huber(Tensor([1.0 + 1e-9])).item()
    assert abs(lo - hi) < 1e-8


# ---------------------------------------------------------------------------
# chamfer


def test_chamfer_hand_example():
    A = [[0.0, 0.0], [1.0, 0.0]]
    B = [[0.0, 0.0], [2.0, 2.0]]
    val = sl.chamfer(A, B).item()
    assert abs(val - chamfer_brute(A, B)) < 1e-12
    assert abs(val - 2.5) < 1e-12  # worked by hand from the Huber pieces


@pytest.mark.parametrize("n,m", [(1, 1), (2, 5), (4, 4), (7, 3)])
def test_chamfer_matches_brute(n, m):
    for _ in range(10):
        A = rng.normal(size=(n, 3))
        B = rng.normal(size=(m, 3))
        assert abs(sl.chamfer(A, B).item() - chamfer_brute(A, B)) < 1e-10


def test_chamfer_zero_iff_equal_support():
    A = rng.normal(size=(4, 2))
    assert sl.chamfer(A, A[rng.permutation(4)]).item() < 1e-15
    assert sl.chamfer(A, A + 0.1).item() > 1e-4


def test_chamfer_permutation_invariant():
    A = rng.normal(size=(6, 2))
    B = rng.normal(size=(5, 2))
    base = sl.chamfer(A, B).item()
    for _ in range(20):
        got = sl.chamfer(A[rng.permutation(6)], B[rng.permutation(5)]).item()
        assert abs(got - base) < 1e-12


def test_chamfer_batched_equals_loop():
    A = rng.normal(size=(3, 5, 2))
    B = rng.normal(size=(3, 4, 2))
    batched = sl.chamfer(A, B).values
    singles = [sl.chamfer(A[i], B[i]).item() for i in range(3)]
    assert np.allclose(batched, singles)


def test_chamfer_masked_equals_unpadded():
    for _ in range(10):
        na, nb = rng.integers(1, 6, size=2)
        A, B = rng.normal(size=(na, 2)), rng.normal(size=(nb, 2))
        pa = sl.pad_ground_truth(A, 7)
        pb = sl.pad_ground_truth(B, 7)
        masked = sl.chamfer(pa.points, pb.points,
                            mask_a=pa.mask, mask_b=pb.mask).item()
        assert abs(masked - sl.chamfer(A, B).item()) < 1e-9


def test_chamfer_mean_reduction():
    A = rng.normal(size=(4, 2))
    B = rng.normal(size=(6, 2))
    C = sl.pairwise_cost(A, B).values
    expect = C.min(axis=1).mean() + C.min(axis=0).mean()
    assert abs(sl.chamfer(A, B, reduction="mean").item() - expect) < 1e-12


def test_chamfer_rejects_empty():
    with pytest.raises(ValueError):
        sl.chamfer(np.zeros((0, 2)), np.zeros((3, 2)))


def test_chamfer_gradient():
    A0 = rng.normal(size=(5, 2))
    B = rng.normal(size=(4, 2))

    def build(a):
        return sl.chamfer(a, Tensor(B))

    a = Tensor(A0.copy(), requires_grad=True)
    g = dc.grad(build(a), [a])[0].values
    ref = finite_diff(lambda v: build(Tensor(v)).item(), A0.copy())
    assert rel_err(g, ref) < 1e-4


def test_chamfer_masked_gradient_zero_on_padding():
    A = rng.normal(size=(3, 2))
    pa = sl.pad_ground_truth(A, 5)
    x = Tensor(pa.points, requires_grad=True)
    loss = sl.chamfer(x, Tensor(rng.normal(size=(4, 2))), mask_a=pa.mask)
    g = dc.grad(loss, [x])[0].values
    assert np.all(g[3:] == 0.0)
    assert np.any(g[:3] != 0.0)


# ---------------------------------------------------------------------------
# assignment


def test_assignment_all_small_matrices():
    for n in range(2, 6):
        for _ in range(20):
            C = rng.uniform(0, 1, size=(n, n))
            got = sl.assignment_solve(C)
            ref_perm, ref_total = assignment_brute(C)
            assert abs(got.total_cost - ref_total) < 1e-9
            # mapping must be injective and achieve the optimal total
            assert len(set(got.row_to_col.tolist())) == n
            achieved = C[np.arange(n), got.row_to_col].sum()
            assert abs(achieved - ref_total) < 1e-9


def test_assignment_rectangular_wide():
    C = rng.uniform(0, 1, size=(3, 6))
    got = sl.assignment_solve(C)
    ref_perm, ref_total = assignment_brute(C)
    assert abs(got.total_cost - ref_total) < 1e-9
    assert len(set(got.row_to_col.tolist())) == 3


def test_assignment_rectangular_tall():
    C = rng.uniform(0, 1, size=(6, 3))
    got = sl.assignment_solve(C)
    ref_perm, ref_total = assignment_brute(C.T)
    assert abs(got.total_cost - ref_total) < 1e-9
    matched = got.row_to_col[got.row_to_col >= 0]
    assert len(matched) == 3 and len(set(matched.tolist())) == 3
    assert np.sum(got.row_to_col == -1) == 3


def test_assignment_deterministic_under_ties():
    C = np.ones((4, 4))
    a = sl.assignment_solve(C)
    b = sl.assignment_solve(C)
    assert np.array_equal(a.row_to_col, b.row_to_col)
    assert abs(a.total_cost - 4.0) < 1e-12


def test_assignment_against_scipy():
    scipy = pytest.importorskip("scipy.optimize")
    for n in (10, 50, 120):
        C = rng.uniform(0, 5, size=(n, n))
        got = sl.assignment_solve(C)
        rows, cols = scipy.linear_sum_assignment(C)
        assert abs(got.total_cost - C[rows, cols].sum()) < 1e-9


def test_cost_matrix_validation():
    with pytest.raises(ValueError):
        sl.CostMatrix(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        sl.CostMatrix(np.array([[np.inf, 1.0], [0.0, 2.0]]))
    with pytest.raises(ValueError):
        sl.CostMatrix(np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# hungarian loss


@pytest.mark.parametrize("n", [1, 2, 4, 6])
def test_hungarian_matches_brute(n):
    for _ in range(10):
        A = rng.normal(size=(n, 2))
        B = rng.normal(size=(n, 2))
        got = sl.hungarian_loss(A, B).item()
        assert abs(got - hungarian_brute(A, B)) < 1e-9


def test_hungarian_at_least_one_sided_chamfer():
    # optimal matching can never beat letting every point pick its nearest
    for _ in range(10):
        A = rng.normal(size=(5, 2))
        B = rng.normal(size=(5, 2))
        C = sl.pairwise_cost(A, B).values
        assert sl.hungarian_loss(A, B).item() >= C.min(axis=1).sum() - 1e-12


def test_hungarian_permutation_invariant():
    A = rng.normal(size=(5, 2))
    B = rng.normal(size=(5, 2))
    base = sl.hungarian_loss(A, B).item()
    for _ in range(10):
        got = sl.hungarian_loss(A[rng.permutation(5)], B[rng.permutation(5)]).item()
        assert abs(got - base) < 1e-12


def test_hungarian_size_mismatch_rejected():
    with pytest.raises(ValueError):
        sl.hungarian_loss(np.zeros((3, 2)), np.zeros((4, 2)))


def test_hungarian_gradient():
    A0 = rng.normal(size=(4, 2))
    B = rng.normal(size=(4, 2))

    def build(a):
        return sl.hungarian_loss(a, Tensor(B))

    a = Tensor(A0.copy(), requires_grad=True)
    g = dc.grad(build(a), [a])[0].values
    ref = finite_diff(lambda v: build(Tensor(v)).item(), A0.copy())
    assert rel_err(g, ref) < 1e-4


def test_repr_loss_batched():
    h = rng.normal(size=(3, 8))
    hh = rng.normal(size=(3, 8))
    got = sl.repr_loss(h, hh).values
    expect = [sum(huber_scalar(x) for x in (h[i] - hh[i])) for i in range(3)]
    assert np.allclose(got, expect)


# ---------------------------------------------------------------------------
# padding and degeneracy


def test_pad_ground_truth():
    pts = rng.normal(size=(3, 2))
    padded = sl.pad_ground_truth(pts, 5)
    assert padded.points.shape == (5, 2)
    assert np.allclose(padded.points[:3], pts)
    assert np.all(padded.points[3:] == 0.0)
    assert padded.mask.tolist() == [1, 1, 1, 0, 0]
    assert padded.cardinality == 3
    with pytest.raises(ValueError):
        sl.pad_ground_truth(pts, 2)


def _distinct_nonzero(n, d=2):
    pts = rng.uniform(0.5, 2.0, size=(n, d)) * np.sign(rng.normal(size=(n, d)))
    return pts + np.arange(n)[:, None]  # guarantee distinct rows


def test_degeneracy_single_pad_is_unique():
    for n in (2, 3, 4):
        rep = sl.degeneracy_count(_distinct_nonzero(n), 1)
        assert rep.count == 1


@pytest.mark.parametrize("n,m", [(2, 2), (2, 3), (3, 2), (3, 3), (4, 2), (4, 3)])
def test_degeneracy_matches_closed_form(n, m):
    # multisets of size n+m over the n+1 support symbols using every symbol:
    # stars and bars gives C(n+m-1, n)
    import math
    rep = sl.degeneracy_count(_distinct_nonzero(n), m)
    assert rep.count == math.comb(n + m - 1, n)
    assert rep.count > 1


def test_degeneracy_witnesses_are_zero_chamfer():
    pts = _distinct_nonzero(3)
    rep = sl.degeneracy_count(pts, 2)
    target = np.vstack([pts, np.zeros((2, 2))])
    for w in rep.witnesses:
        assert sl.chamfer(w, target).item() <= 1e-12
    # the target itself must be among the witnesses
    canon = {tuple(sorted(map(tuple, w))) for w in rep.witnesses}
    assert tuple(sorted(map(tuple, target))) in canon


def test_degeneracy_validation():
    with pytest.raises(ValueError):
        sl.degeneracy_count(np.zeros((2, 2)), 1)       # zero rows collide
    with pytest.raises(ValueError):
        sl.degeneracy_count(np.ones((2, 2)), 1)        # duplicates
    with pytest.raises(ValueError):
        sl.degeneracy_count(_distinct_nonzero(5), 1)   # too large
    with pytest.raises(ValueError):
        sl.degeneracy_count(_distinct_nonzero(2), 4)   # too many pads
