"""Decoder equivariance, inner-loop behaviour, and end-to-end gradients."""

import numpy as np
import pytest

import setforge.diffcore as dc
import setforge.generators as gen
import setforge.setloss as sl
from setforge.diffcore import Tensor
from setforge.encoders import SetEncoder

from oracles import finite_diff, rel_err

rng = np.random.default_rng(4242)


def small_tspn():
    return gen.TSPN(dim=2, embed=6, width=8, rng=rng, heads=2, layers=2,
                    shared=True)


def small_encoder(d_in):
    return SetEncoder(d_in, 12, 6, rng)


# ---------------------------------------------------------------------------
# attention and TSPN


def test_attention_equivariant():
    t = small_tspn()
    x = rng.normal(size=(1, 5, 8))
    blk = t.blocks[0]
    out = blk(Tensor(x)).values
    for _ in range(20):
        p = rng.permutation(5)
        got = blk(Tensor(x[:, p])).values
        assert np.max(np.abs(got - out[:, p])) < 1e-9


def test_tspn_decode_equivariant():
    t = small_tspn()
    h = Tensor(rng.normal(size=(1, 6)))
    init = rng.normal(size=(1, 5, 2))
    base = t.decode(h, [5], initial=Tensor(init)).points.values
    for _ in range(20):
        p = rng.permutation(5)
        got = t.decode(h, [5], initial=Tensor(init[:, p])).points.values
        assert np.max(np.abs(got - base[:, p])) < 1e-9


def test_tspn_decode_shapes_and_mask():
    t = small_tspn()
    h = Tensor(rng.normal(size=(3, 6)))
    pred = t.decode(h, [2, 5, 3], rng=np.random.default_rng(0))
    assert pred.points.shape == (3, 5, 2)
    assert pred.presence.values[0].tolist() == [1, 1, 0, 0, 0]
    assert pred.sizes.tolist() == [2, 5, 3]
    with pytest.raises(ValueError):
        t.decode(h, [0, 1, 2], rng=np.random.default_rng(0))


def test_tspn_handles_large_size():
    t = small_tspn()
    h = Tensor(rng.normal(size=(1, 6)))
    pred = t.decode(h, [600], rng=np.random.default_rng(0))
    assert pred.points.shape == (1, 600, 2)


def test_tspn_initial_set_statistics():
    t = small_tspn()
    t.alpha.values = np.asarray(1.5)
    t.beta_raw.values = np.asarray(5.0)  # softplus(5) ~= 5.0067
    x = t.sample_initial(np.array([4000]), np.random.default_rng(1)).values
    assert abs(x.mean() - 1.5) < 0.05
    assert abs(x.var() - np.log1p(np.exp(5.0))) < 0.2


def test_tspn_gradient_reaches_alpha_beta():
    t = small_tspn()
    h = Tensor(rng.normal(size=(2, 6)))
    target = rng.normal(size=(2, 4, 2))
    pred = t.decode(h, [4, 4], rng=np.random.default_rng(3))
    loss = dc.reduce_mean(sl.chamfer(pred.points, Tensor(target)))
    g = dc.grad(loss, [t.alpha, t.beta_raw])
    assert abs(g[0].item()) > 0
    assert abs(g[1].item()) > 0


def test_tspn_gradient_alpha_matches_finite_diff():
    t = small_tspn()
    h = Tensor(rng.normal(size=(1, 6)))
    target = rng.normal(size=(1, 4, 2))
    seed_rng = lambda: np.random.default_rng(11)

    def loss_at(alpha_val):
        t.alpha.values = np.asarray(alpha_val)
        pred = t.decode(h, [4], rng=seed_rng())
        return dc.reduce_mean(sl.chamfer(pred.points, Tensor(target))).item()

    a0 = 0.3
    t.alpha.values = np.asarray(a0)
    pred = t.decode(h, [4], rng=seed_rng())
    loss = dc.reduce_mean(sl.chamfer(pred.points, Tensor(target)))
    g = dc.grad(loss, [t.alpha])[0].item()
    eps = 1e-5
    ref = (loss_at(a0 + eps) - loss_at(a0 - eps)) / (2 * eps)
    t.alpha.values = np.asarray(a0)
    assert rel_err(np.array(g), np.array(ref)) < 1e-4


# ---------------------------------------------------------------------------
# cardinality head


def test_cardinality_head_learns_trivial_map():
    head = gen.CardinalityHead(4, 6, rng, hidden=32)
    h = np.zeros((3, 4))
    h[0, 0] = h[1, 1] = h[2, 2] = 1.0
    sizes = np.array([1, 3, 5])
    params = head.params()
    opt = dc.Adam(params, lr=0.05)
    for _ in range(200):
        loss = head.loss(Tensor(h), sizes)
        grads = dc.grad(loss, list(params.values()))
        opt.step({k: g.values for k, g in zip(params, grads)})
    assert head.predict(Tensor(h)).tolist() == [1, 3, 5]
    with pytest.raises(ValueError):
        head.loss(Tensor(h), np.array([1, 2, 7]))


# ---------------------------------------------------------------------------
# DSPN family


def test_dspn_decode_shapes():
    e = small_encoder(3)
    d = gen.DSPN(e, n_max=6, dim=2, rng=rng, steps=3, inner_lr=1.0)
    h = Tensor(rng.normal(size=(2, 6)))
    pred, h_final = d.decode(h)
    assert pred.points.shape == (2, 6, 2)
    assert pred.presence.shape == (2, 6)
    assert np.all((pred.presence.values >= 0) & (pred.presence.values <= 1))
    assert h_final.shape == (2, 6)


def test_dspn_inner_objective_decreases():
    e = small_encoder(3)
    d = gen.DSPN(e, n_max=6, dim=2, rng=rng, steps=8, inner_lr=0.05)
    h = Tensor(rng.normal(size=(2, 6)) * 0.1)
    _, _, trace = d.decode(h, return_trace=True)
    # a sane inner step size must not blow the objective up overall
    assert trace[-1] < trace[0]


def test_dspn_equivariant_to_initial_permutation():
    e = small_encoder(3)
    d = gen.DSPN(e, n_max=5, dim=2, rng=rng, steps=3, inner_lr=0.1)
    h = Tensor(rng.normal(size=(1, 6)))
    base, _ = d.decode(h)
    x0 = d.x0.values.copy()
    for _ in range(10):
        p = rng.permutation(5)
        d.x0.values = x0[p]
        got, _ = d.decode(h)
        assert np.max(np.abs(got.points.values - base.points.values[:, p])) < 1e-9
    d.x0.values = x0


def test_cdspn_masked_rows_frozen():
    e = small_encoder(2)
    d = gen.CDSPN(e, n_max=6, dim=2, rng=rng, steps=4, inner_lr=0.1)
    h = Tensor(rng.normal(size=(2, 6)))
    pred, _ = d.decode(h, [2, 4])
    assert pred.points.shape == (2, 4, 2)
    # rows beyond each size must still equal the initial template
    assert np.allclose(pred.points.values[0, 2:], d.x0.values[2:4])
    assert np.max(np.abs(pred.presence.values - [[1, 1, 0, 0], [1, 1, 1, 1]])) == 0


def test_cdspn_size_validation():
    e = small_encoder(2)
    d = gen.CDSPN(e, n_max=4, dim=2, rng=rng)
    h = Tensor(rng.normal(size=(1, 6)))
    with pytest.raises(ValueError):
        d.decode(h, [5])
    with pytest.raises(ValueError):
        d.decode(h, [0])


# ---------------------------------------------------------------------------
# the load-bearing test: gradients THROUGH the unrolled inner loop


def _dspn_outer_loss(d, h, target):
    pred, h_final = d.decode(h)
    pts = dc.concat([pred.points,
                     dc.reshape(pred.presence, pred.presence.shape + (1,))],
                    axis=-1)
    main = dc.reduce_mean(sl.chamfer(pts, Tensor(target)))
    reg = dc.reduce_mean(sl.repr_loss(h, h_final))
    return main + 0.1 * reg


def test_dspn_outer_gradient_matches_finite_diff():
    e = small_encoder(3)
    d = gen.DSPN(e, n_max=4, dim=2, rng=rng, steps=3, inner_lr=0.05)
    h = Tensor(rng.normal(size=(2, 6)) * 0.3)
    target = rng.normal(size=(2, 4, 3)) * 0.3

    params = d.params()
    loss = _dspn_outer_loss(d, h, target)
    grads = dc.grad(loss, list(params.values()))

    for name in ["dspn.x0", "dspn.encoder.pool.table", "dspn.encoder.pre.0.w",
                 "dspn.encoder.post.b"]:
        p = params[name]
        g = grads[list(params).index(name)].values
        p0 = p.values.copy()

        def f(v):
            p.values = v
            return _dspn_outer_loss(d, h, target).item()

        ref = finite_diff(f, p0.copy())
        p.values = p0
        err = rel_err(g, ref)
        assert err < 1e-4, f"{name}: rel err {err:.2e}"


def test_dspn_gradient_reaches_conditioning():
    # the embedding feeds the inner loss; its gradient must survive the unroll
    e = small_encoder(3)
    d = gen.DSPN(e, n_max=4, dim=2, rng=rng, steps=2, inner_lr=0.05)
    h = Tensor(rng.normal(size=(1, 6)) * 0.3, requires_grad=True)
    target = rng.normal(size=(1, 4, 3)) * 0.3
    loss = _dspn_outer_loss(d, h, target)
    g = dc.grad(loss, [h])[0].values
    h0 = h.values.copy()

    def f(v):
        h.values = v
        return _dspn_outer_loss(d, Tensor(v), target).item()

    ref = finite_diff(f, h0.copy())
    h.values = h0
    assert rel_err(g, ref) < 1e-4


def test_cdspn_outer_gradient_matches_finite_diff():
    e = small_encoder(2)
    d = gen.CDSPN(e, n_max=5, dim=2, rng=rng, steps=3, inner_lr=0.05)
    h = Tensor(rng.normal(size=(2, 6)) * 0.3)
    sizes = [3, 5]
    target = rng.normal(size=(2, 5, 2)) * 0.3
    mask = gen._mask_from_sizes(np.array(sizes), 5)

    def loss_fn():
        pred, h_final = d.decode(h, sizes)
        main = dc.reduce_mean(sl.chamfer(pred.points, Tensor(target)),
                              )
        reg = dc.reduce_mean(sl.repr_loss(h, h_final))
        return main + 0.1 * reg

    params = d.params()
    loss = loss_fn()
    grads = dc.grad(loss, list(params.values()))
    for name in ["cdspn.x0", "cdspn.encoder.pre.0.w"]:
        p = params[name]
        g = grads[list(params).index(name)].values
        p0 = p.values.copy()

        def f(v):
            p.values = v
            return loss_fn().item()

        ref = finite_diff(f, p0.copy())
        p.values = p0
        err = rel_err(g, ref)
        assert err < 1e-4, f"{name}: rel err {err:.2e}"


def test_tspn_full_param_gradient_matches_finite_diff():
    t = small_tspn()
    h = Tensor(rng.normal(size=(2, 6)))
    target = rng.normal(size=(2, 3, 2))
    seed_rng = lambda: np.random.default_rng(5)

    def loss_fn():
        pred = t.decode(h, [3, 2], rng=seed_rng())
        return dc.reduce_mean(
            sl.chamfer(pred.points, Tensor(target),
                       mask_a=pred.presence.values,
                       mask_b=gen._mask_from_sizes(np.array([3, 2]), 3)))

    params = t.params()
    loss = loss_fn()
    grads = dc.grad(loss, list(params.values()))
    for name in ["tspn.alpha", "tspn.block0.wq.w", "tspn.in_proj.w",
                 "tspn.out_proj.b"]:
        p = params[name]
        g = grads[list(params).index(name)].values
        p0 = p.values.copy()

        def f(v):
            p.values = v
            return loss_fn().item()

        ref = finite_diff(f, p0.copy())
        p.values = p0
        err = rel_err(g, ref)
        assert err < 1e-4, f"{name}: rel err {err:.2e}"
