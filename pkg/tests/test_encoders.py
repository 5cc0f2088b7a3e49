"""Set encoder invariance and gradient checks."""

import numpy as np
import pytest

import setforge.diffcore as dc
import setforge.encoders as enc
from setforge.diffcore import Tensor

from oracles import finite_diff, rel_err

rng = np.random.default_rng(777)


def test_fspool_constant_table_is_mean():
    pool = enc.FSPool(3, rng, knots=4)
    n = 6
    pool.table.values = np.full_like(pool.table.values, 1.0 / n)
    x = rng.normal(size=(2, n, 3))
    out = pool(Tensor(x)).values
    assert np.allclose(out, x.mean(axis=1), atol=1e-12)


def test_fspool_permutation_invariant():
    pool = enc.FSPool(4, rng)
    x = rng.normal(size=(1, 7, 4))
    base = pool(Tensor(x)).values
    for _ in range(20):
        out = pool(Tensor(x[:, rng.permutation(7)])).values
        assert np.max(np.abs(out - base)) < 1e-9


def test_fspool_masked_equals_trimmed():
    pool = enc.FSPool(3, rng)
    for n_real in (1, 3, 5):
        x = rng.normal(size=(1, 6, 3))
        mask = np.zeros((1, 6))
        mask[0, :n_real] = 1.0
        a = pool(Tensor(x), mask).values
        b = pool(Tensor(x[:, :n_real])).values
        assert np.max(np.abs(a - b)) < 1e-9


def test_fspool_gradient():
    pool = enc.FSPool(2, rng, knots=5)
    x0 = rng.normal(size=(1, 5, 2))

    def build_x(x):
        return dc.reduce_sum(dc.square(pool(x)))

    x = Tensor(x0.copy(), requires_grad=True)
    g = dc.grad(build_x(x), [x])[0].values
    ref = finite_diff(lambda v: build_x(Tensor(v)).item(), x0.copy())
    assert rel_err(g, ref) < 1e-4

    # and through the weight table
    t0 = pool.table.values.copy()

    def build_t(tv):
        pool.table.values = tv
        return dc.reduce_sum(dc.square(pool(Tensor(x0)))).item()

    loss = dc.reduce_sum(dc.square(pool(Tensor(x0))))
    gt = dc.grad(loss, [pool.table])[0].values
    ref_t = finite_diff(build_t, t0.copy())
    pool.table.values = t0
    assert rel_err(gt, ref_t) < 1e-4


def test_set_encoder_invariant_and_mask_consistent():
    e = enc.SetEncoder(2, 16, 8, rng)
    x = rng.normal(size=(2, 6, 2))
    base = e(x).values
    for _ in range(10):
        out = e(x[:, rng.permutation(6)]).values
        assert np.max(np.abs(out - base)) < 1e-9
    mask = np.ones((2, 6))
    assert np.max(np.abs(e(x, mask).values - base)) < 1e-9


def test_set_encoder_distinguishes_sets():
    e = enc.SetEncoder(2, 16, 8, rng)
    x = rng.normal(size=(1, 5, 2))
    y = x + rng.normal(size=(1, 5, 2)) * 0.5
    assert np.max(np.abs(e(x).values - e(y).values)) > 1e-4


def test_conv_indices_shapes():
    idx, oh, ow, pad = enc._conv_indices(8, 8, 3, 2)
    assert (oh, ow, pad) == (4, 4, 1)
    assert idx.shape == (16, 9)
    assert idx.max() < 10 * 10


def test_conv2d_matches_naive():
    conv = enc.Conv2d(2, 3, rng, k=3, stride=2)
    x = rng.normal(size=(1, 6, 6, 2))
    out = conv(Tensor(x)).values

    # naive same-padding stride-2 convolution
    W = conv.w.values.reshape(3, 3, 2, 3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for oy in range(3):
        for ox in range(3):
            patch = xp[0, 2 * oy:2 * oy + 3, 2 * ox:2 * ox + 3]
            expect = np.einsum("hwc,hwco->o", patch, W) + conv.b.values
            assert np.max(np.abs(out[0, oy, ox] - expect)) < 1e-10


def test_conv2d_gradient():
    conv = enc.Conv2d(1, 2, rng, k=3, stride=2)
    x0 = rng.normal(size=(1, 4, 4, 1))

    def build(x):
        return dc.reduce_sum(dc.square(conv(x)))

    x = Tensor(x0.copy(), requires_grad=True)
    g = dc.grad(build(x), [x])[0].values
    ref = finite_diff(lambda v: build(Tensor(v)).item(), x0.copy())
    assert rel_err(g, ref) < 1e-4

    loss = build(Tensor(x0))
    gw = dc.grad(loss, [conv.w])[0].values
    w0 = conv.w.values.copy()

    def build_w(wv):
        conv.w.values = wv
        return dc.reduce_sum(dc.square(conv(Tensor(x0)))).item()

    ref_w = finite_diff(build_w, w0.copy())
    conv.w.values = w0
    assert rel_err(gw, ref_w) < 1e-4


def test_image_encoder_end_to_end():
    e = enc.ConvImageEncoder(8, rng, channels=(4, 8))
    imgs = rng.uniform(size=(2, 16, 16, 3))
    out = e(imgs)
    assert out.shape == (2, 8)
    params = e.params()
    loss = dc.reduce_sum(dc.square(out))
    grads = dc.grad(loss, list(params.values()))
    assert all(np.all(np.isfinite(g.values)) for g in grads)
    assert any(np.any(g.values != 0) for g in grads)
