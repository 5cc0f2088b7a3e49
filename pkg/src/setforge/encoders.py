"""Permutation-invariant set encoding and a small image encoder.

The set encoder is the DeepSets pattern: a shared per-element network, a
pooling step, a projection. Pooling is featurewise sort pooling: each feature
channel is sorted and weighted by a learned piecewise-linear function of
normalised rank, which keeps the result exactly invariant to input order
while being far more expressive than sum or max.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .nn import MLP, Linear, glorot, merge_params

# shift used to sink masked rows below every real value before sorting
_SINK = 1e9


class FSPool:
    """Featurewise sort pooling with ``knots + 1`` learned control points.

    Input (B, N, d) -> (B, d). Each feature column is sorted descending; the
    value at normalised rank r in [0, 1] is weighted by a piecewise-linear
    interpolation of that feature's control points, and the weighted values
    are summed. A constant table at value 1/N reduces to mean pooling. With a
    mask, padded rows get weight zero and real ranks are normalised by the
    true set size.
    """

    def __init__(self, d: int, rng: np.random.Generator, knots: int = 20):
        self.knots = knots
        self.table = Tensor(glorot(rng, d, knots + 1), requires_grad=True)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        b, n, d = x.shape
        if mask is not None:
            m = np.asarray(mask, dtype=np.float64)
            x = x + dc.constant(((m - 1.0) * _SINK)[:, :, None])
            counts = m.sum(axis=1)
        else:
            m = None
            counts = np.full(b, float(n))

        sorted_x, perm = dc.sort_descending(x, axis=1)

        # normalised rank of each slot, per example
        denom = np.maximum(counts - 1.0, 1.0)
        r = np.arange(n)[None, :] / denom[:, None]
        r = np.clip(r, 0.0, 1.0)

        # piecewise-linear lookup into the weight table
        pos = r * self.knots
        lo = np.floor(pos).astype(np.int64)
        lo = np.minimum(lo, self.knots - 1)
        frac = dc.constant((pos - lo)[:, :, None])
        w_lo = dc.transpose(dc.take(self.table, lo, axis=1), (1, 2, 0))
        w_hi = dc.transpose(dc.take(self.table, lo + 1, axis=1), (1, 2, 0))
        weights = w_lo * (1.0 - frac) + w_hi * frac

        if m is not None:
            # zero weight for sunk rows; perm is feature-wise so the mask
            # must be reordered per feature channel
            m_sorted = np.take_along_axis(
                np.broadcast_to(m[:, :, None], (b, n, d)), perm, axis=1
            )
            weights = weights * dc.constant(m_sorted)

        return dc.reduce_sum(sorted_x * weights, axis=1)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.table": self.table}


class SetEncoder:
    """DeepSets with FSPool: shared MLP per element, pool, project."""

    def __init__(self, d_in: int, hidden: int, embed: int,
                 rng: np.random.Generator, knots: int = 20):
        self.pre = MLP([d_in, hidden, hidden], rng)
        self.pool = FSPool(hidden, rng, knots)
        self.post = Linear(hidden, embed, rng)

    def __call__(self, points, mask=None) -> Tensor:
        x = dc.astensor(points)
        feats = dc.relu(self.pre(x))
        pooled = self.pool(feats, mask)
        return self.post(pooled)

    def params(self, prefix: str = "set_encoder") -> dict:
        return merge_params(self.pre.params(f"{prefix}.pre"),
                            self.pool.params(f"{prefix}.pool"),
                            self.post.params(f"{prefix}.post"))


# ---------------------------------------------------------------------------
# image encoder


def _conv_indices(h: int, w: int, k: int, stride: int):
    """Flat gather indices turning a padded (h+2p, w+2p) plane into patches."""
    pad = k // 2
    hp, wp = h + 2 * pad, w + 2 * pad
    out_h = (h - 1) // stride + 1
    out_w = (w - 1) // stride + 1
    row0 = np.arange(out_h) * stride
    col0 = np.arange(out_w) * stride
    dr, dcol = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    rows = row0[:, None, None, None] + dr[None, None]
    cols = col0[None, :, None, None] + dcol[None, None]
    idx = (rows * wp + cols).reshape(out_h * out_w, k * k)
    return idx, out_h, out_w, pad


class Conv2d:
    """Strided same-padding convolution built from gather + matmul.

    Works on channels-last (B, H, W, C). Patch extraction is a constant
    index gather, so the whole layer differentiates through take/matmul.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 k: int = 3, stride: int = 2):
        self.k, self.stride, self.c_in = k, stride, c_in
        self.w = Tensor(glorot(rng, k * k * c_in, c_out), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self._cache = {}

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        key = (h, w)
        if key not in self._cache:
            self._cache[key] = _conv_indices(h, w, self.k, self.stride)
        idx, out_h, out_w, pad = self._cache[key]

        zx = dc.constant(np.zeros((b, pad, w, c)))
        x = dc.concat([zx, x, zx], axis=1)
        zy = dc.constant(np.zeros((b, h + 2 * pad, pad, c)))
        x = dc.concat([zy, x, zy], axis=2)

        flat = dc.reshape(x, (b, (h + 2 * pad) * (w + 2 * pad), c))
        patches = dc.take(flat, idx, axis=1)            # (b, P, k*k, c)
        patches = dc.reshape(patches, (b, idx.shape[0], self.k * self.k * c))
        out = dc.matmul(patches, self.w) + self.b
        return dc.reshape(out, (b, out_h, out_w, self.w.shape[1]))

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class ConvImageEncoder:
    """Stride-2 conv stack, global average pool, linear head."""

    def __init__(self, embed: int, rng: np.random.Generator,
                 channels=(16, 32, 64, 64), c_in: int = 3):
        chain = [c_in] + list(channels)
        self.convs = [Conv2d(chain[i], chain[i + 1], rng)
                      for i in range(len(channels))]
        self.head = Linear(channels[-1], embed, rng)

    def __call__(self, images) -> Tensor:
        x = dc.astensor(images)
        for conv in self.convs:
            x = dc.relu(conv(x))
        pooled = dc.reduce_mean(x, axis=(1, 2))
        return self.head(pooled)

    def params(self, prefix: str = "image_encoder") -> dict:
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"{prefix}.conv{i}"))
        out.update(self.head.params(f"{prefix}.head"))
        return out
