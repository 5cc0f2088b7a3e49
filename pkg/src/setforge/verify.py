"""Self-check suites runnable from the CLI.

Each suite returns a list of (property_name, passed, detail) and is pure
computation with fixed seeds, so a pass is reproducible and a failure names
the first offending case. The suites double as the acceptance evidence for
the library's core claims: optimal matching, order symmetry, gradient
correctness, and the padding degeneracy.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from . import diffcore as dc
from . import setloss
from .diffcore import Tensor, make_rng
from .encoders import SetEncoder
from .generators import DSPN, TSPN

GRAD_TOL = 1e-4
SYM_TOL = 1e-9


def finite_diff(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.ravel(), g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f(x)
        flat[i] = keep - eps
        lo = f(x)
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def _rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / denom


def _brute_assignment(C: np.ndarray) -> float:
    n = C.shape[0]
    return min(sum(C[i, p[i]] for i in range(n))
               for p in itertools.permutations(range(n)))


# ---------------------------------------------------------------------------


def suite_losses(pairs_per_size: int = 200, sizes=range(2, 8)) -> list:
    """Hungarian loss against brute-force permutation minimum."""
    rng = make_rng(2024, 1)
    results = []
    for n in sizes:
        worst = 0.0
        for _ in range(pairs_per_size):
            A = rng.normal(size=(n, 2))
            B = rng.normal(size=(n, 2))
            got = setloss.hungarian_loss(A, B).item()
            ref = _brute_assignment(setloss.pairwise_cost(A, B).values)
            worst = max(worst, abs(got - ref))
        results.append((f"hungarian_optimal_n{n}", worst < 1e-9,
                        f"max |err| {worst:.2e} over {pairs_per_size} pairs"))
    # chamfer against direct nearest-neighbour evaluation
    worst = 0.0
    for _ in range(100):
        A = rng.normal(size=(rng.integers(1, 7), 3))
        B = rng.normal(size=(rng.integers(1, 7), 3))
        C = setloss.pairwise_cost(A, B).values
        ref = C.min(axis=1).sum() + C.min(axis=0).sum()
        worst = max(worst, abs(setloss.chamfer(A, B).item() - ref))
    results.append(("chamfer_nearest_neighbour", worst < 1e-9,
                    f"max |err| {worst:.2e} over 100 pairs"))
    return results


def suite_equivariance(trials: int = 100) -> list:
    rng = make_rng(2024, 2)
    enc = SetEncoder(2, 24, 12, make_rng(7, 0))
    tspn = TSPN(2, 12, 16, make_rng(7, 1), heads=4, layers=2)
    dspn = DSPN(SetEncoder(3, 16, 12, make_rng(7, 2)), n_max=6, dim=2,
                rng=make_rng(7, 3), steps=3, inner_lr=0.05)

    worst_inv = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 9))
        x = rng.normal(size=(1, n, 2))
        base = enc(Tensor(x)).values
        got = enc(Tensor(x[:, rng.permutation(n)])).values
        worst_inv = max(worst_inv, float(np.max(np.abs(got - base))))

    worst_tspn = 0.0
    h = Tensor(rng.normal(size=(1, 12)))
    for _ in range(trials):
        n = int(rng.integers(2, 9))
        init = rng.normal(size=(1, n, 2))
        p = rng.permutation(n)
        base = tspn.decode(h, [n], initial=Tensor(init)).points.values
        got = tspn.decode(h, [n], initial=Tensor(init[:, p])).points.values
        worst_tspn = max(worst_tspn, float(np.max(np.abs(got - base[:, p]))))

    worst_dspn = 0.0
    x0 = dspn.x0.values.copy()
    for _ in range(trials):
        p = rng.permutation(dspn.n_max)
        dspn.x0.values = x0
        base, _ = dspn.decode(Tensor(h.values))
        dspn.x0.values = x0[p]
        got, _ = dspn.decode(Tensor(h.values))
        worst_dspn = max(worst_dspn, float(
            np.max(np.abs(got.points.values - base.points.values[:, p]))))
    dspn.x0.values = x0

    return [
        ("set_encoder_invariance", worst_inv < SYM_TOL,
         f"max dev {worst_inv:.2e} over {trials} trials"),
        ("tspn_decode_equivariance", worst_tspn < SYM_TOL,
         f"max dev {worst_tspn:.2e} over {trials} trials"),
        ("dspn_decode_equivariance", worst_dspn < SYM_TOL,
         f"max dev {worst_dspn:.2e} over {trials} trials"),
    ]


def _op_cases(rng):
    """(name, build, sampler) triples covering every differentiable op."""
    def r(*shape):
        return rng.normal(size=shape)

    def pos(*shape):
        return rng.uniform(0.5, 2.0, size=shape)

    def away_from_kinks(*shape):
        x = rng.normal(size=shape)
        x[np.abs(x) < 0.05] = 0.37
        x[np.abs(np.abs(x) - 1.0) < 0.05] = 0.37
        return x

    w1 = dc.constant(r(4, 3))
    w2 = dc.constant(r(3, 5))
    w3 = dc.constant(r(4, 4))
    row3 = r(3)
    tgt_ch = dc.constant(r(4, 2))
    tgt_hu = dc.constant(r(4, 2))
    idx_dup = np.array([0, 2, 2, 1])
    perm = np.stack([rng.permutation(4) for _ in range(3)])
    labels = np.array([1, 0, 3])

    return [
        ("add", lambda x: dc.reduce_sum(dc.square(x + w1)), lambda: r(4, 3)),
        ("subtract", lambda x: dc.reduce_sum(dc.square(w1 - x)), lambda: r(4, 3)),
        ("multiply", lambda x: dc.reduce_sum(dc.square(x * w1)), lambda: r(4, 3)),
        ("divide", lambda x: dc.reduce_sum(x / (dc.square(x) + 1.5)),
         lambda: r(4, 3)),
        ("matmul", lambda x: dc.reduce_sum(dc.square(dc.matmul(x, w2))),
         lambda: r(4, 3)),
        ("square", lambda x: dc.reduce_sum(dc.square(x)), lambda: r(5,)),
        ("sqrt", lambda x: dc.reduce_sum(dc.sqrt(x)), lambda: pos(5,)),
        ("exp", lambda x: dc.reduce_sum(dc.exp(x)), lambda: r(5,)),
        ("log", lambda x: dc.reduce_sum(dc.log(x)), lambda: pos(5,)),
        ("abs", lambda x: dc.reduce_sum(dc.absolute(x)),
         lambda: away_from_kinks(5,)),
        ("relu", lambda x: dc.reduce_sum(dc.relu(x)),
         lambda: away_from_kinks(5,)),
        ("clip", lambda x: dc.reduce_sum(dc.square(dc.clip(x, -1, 1))),
         lambda: away_from_kinks(6,)),
        ("sigmoid", lambda x: dc.reduce_sum(dc.sigmoid(x)), lambda: r(5,)),
        ("softplus", lambda x: dc.reduce_sum(dc.softplus(x)), lambda: r(5,)),
        ("softmax", lambda x: dc.reduce_sum(dc.square(
            dc.softmax(x, axis=-1))), lambda: r(3, 4)),
        ("reshape", lambda x: dc.reduce_sum(dc.square(
            dc.reshape(x, (6, 2)))), lambda: r(3, 4)),
        ("transpose", lambda x: dc.reduce_sum(dc.square(
            dc.transpose(x, (1, 0)) @ w3)), lambda: r(4, 3)),
        ("broadcast_to", lambda x: dc.reduce_sum(dc.square(
            dc.broadcast_to(x, (5, 4)) * 0.7)), lambda: r(1, 4)),
        ("concat", lambda x: dc.reduce_sum(dc.square(
            dc.concat([x, x * 2.0], axis=1))), lambda: r(3, 2)),
        ("take", lambda x: dc.reduce_sum(dc.square(
            dc.take(x, idx_dup, axis=0))), lambda: r(4, 2)),
        ("take_along_axis", lambda x: dc.reduce_sum(dc.square(
            dc.take_along_axis(x, perm, axis=1, permutation=True))),
         lambda: r(3, 4)),
        ("scatter_add", lambda x: dc.reduce_sum(dc.square(
            dc.scatter_add(x, idx_dup, 0, (6, 2)))), lambda: r(4, 2)),
        ("sort_descending", lambda x: dc.reduce_sum(
            dc.sort_descending(x, axis=1)[0] * row3[None, :]),
         lambda: r(2, 3)),
        ("reduce_sum", lambda x: dc.reduce_sum(dc.square(
            dc.reduce_sum(x, axis=1))), lambda: r(3, 4)),
        ("reduce_mean", lambda x: dc.reduce_sum(dc.square(
            dc.reduce_mean(x, axis=0))), lambda: r(3, 4)),
        ("reduce_min", lambda x: dc.reduce_sum(dc.reduce_min(x, axis=1)),
         lambda: r(3, 4)),
        ("reduce_max", lambda x: dc.reduce_sum(dc.reduce_max(x, axis=0)),
         lambda: r(3, 4)),
        ("layer_norm", lambda x: dc.reduce_sum(dc.square(
            dc.layer_norm(x, axis=-1) * row3)), lambda: r(2, 3)),
        ("cross_entropy", lambda x: dc.cross_entropy_logits(x, labels),
         lambda: r(3, 5)),
        ("huber", lambda x: dc.reduce_sum(setloss.huber(x)),
         lambda: away_from_kinks(6,)),
        ("chamfer", lambda x: setloss.chamfer(x, tgt_ch), lambda: r(5, 2)),
        ("hungarian", lambda x: setloss.hungarian_loss(x, tgt_hu),
         lambda: r(4, 2)),
    ]


def suite_gradients(configs_per_op: int = 10) -> list:
    rng = make_rng(2024, 3)
    results = []
    for name, build, sample in _op_cases(rng):
        worst = 0.0
        for _ in range(configs_per_op):
            x0 = sample()
            x = Tensor(np.array(x0), requires_grad=True)
            g = dc.grad(build(x), [x])[0].values
            ref = finite_diff(lambda v: build(Tensor(v)).item(),
                              np.array(x0))
            worst = max(worst, _rel_err(g, ref))
        results.append((f"grad_{name}", worst < GRAD_TOL,
                        f"max rel err {worst:.2e} over {configs_per_op} configs"))
    return results


def suite_degeneracy() -> list:
    """Exhaustive count of loss-equivalent multisets under zero padding."""
    rng = make_rng(2024, 4)
    results = []
    for n in (2, 3, 4):
        pts = rng.uniform(0.2, 1.0, size=(n, 2)) + np.arange(n)[:, None]
        for m in (1, 2, 3):
            rep = setloss.degeneracy_count(pts, m)
            expect = math.comb(n + m - 1, n)
            ok = rep.count == expect and (rep.count > 1) == (m >= 2)
            target = np.vstack([pts, np.zeros((m, 2))])
            zero_ok = all(setloss.chamfer(w, target).item() <= 1e-12
                          for w in rep.witnesses)
            results.append((f"degeneracy_n{n}_m{m}", ok and zero_ok,
                            f"count {rep.count} (stars-and-bars {expect}), "
                            f"all witnesses at zero loss: {zero_ok}"))
    return results


SUITES = {
    "losses": suite_losses,
    "equivariance": suite_equivariance,
    "gradients": suite_gradients,
    "degeneracy": suite_degeneracy,
}


def corrupt_solver() -> None:
    """Test hook: break the assignment solver so suites demonstrably fail."""
    def identity_assignment(C: np.ndarray) -> np.ndarray:
        return np.arange(C.shape[0], dtype=np.int64)
    setloss._lapjv_square = identity_assignment


def run_suites(names, quick: bool = False) -> list:
    results = []
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown suite {name!r}")
        if name == "losses" and quick:
            results.extend(suite_losses(pairs_per_size=20))
        elif name == "equivariance" and quick:
            results.extend(suite_equivariance(trials=20))
        elif name == "gradients" and quick:
            results.extend(suite_gradients(configs_per_op=2))
        else:
            results.extend(SUITES[name]())
    return results
