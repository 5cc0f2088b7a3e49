"""Conditional set decoders.

Three ways to turn a fixed-size embedding into a set of vectors:

* ``TSPN``: sample an initial set of the requested size from a learned
  isotropic Gaussian, append the embedding to every element, and refine with
  a stack of multi-head self-attention layers. Permutation-equivariant by
  construction and size-agnostic, so it can decode set sizes never seen in
  training. Cardinality comes from a separate classifier over the embedding.

* ``DSPN``: keep a learned initial set of fixed maximum size with a presence
  logit per element, and run a few steps of gradient descent on the elements
  so that re-encoding the set matches the target embedding. The inner
  gradient is itself part of the computation graph, so the whole unrolled
  procedure trains end to end.

* ``CDSPN``: DSPN without presence scores; the true cardinality selects how
  many elements participate, removing the zero-padding pathology at the cost
  of needing the size told to it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from . import setloss
from .nn import MLP, Linear, glorot, merge_params

_NEG = 1e9  # additive mask penalty inside attention


@dataclass
class SetPrediction:
    """Decoder output. ``points`` is (B, N, d); ``presence`` is (B, N) in
    [0, 1] (hard 0/1 when sizes were given); ``sizes`` are integer
    cardinalities implied by presence."""

    points: Tensor
    presence: Tensor
    sizes: np.ndarray


def _mask_from_sizes(sizes: np.ndarray, n: int) -> np.ndarray:
    return (np.arange(n)[None, :] < np.asarray(sizes)[:, None]).astype(np.float64)


def multihead_attention(x: Tensor, wq: Linear, wk: Linear, wv: Linear,
                        wo: Linear, heads: int, mask=None) -> Tensor:
    """Standard scaled dot-product self-attention over (B, N, D).

    ``mask`` (B, N) hides padded key slots. Equivariant over N: permuting
    rows of ``x`` (and the mask) permutes the output identically.
    """
    b, n, d = x.shape
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return dc.transpose(dc.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(wq(x)), split(wk(x)), split(wv(x))
    scores = dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if mask is not None:
        pen = (np.asarray(mask, dtype=np.float64) - 1.0) * _NEG
        scores = scores + dc.constant(pen[:, None, None, :])
    att = dc.softmax(scores, axis=-1)
    out = dc.transpose(dc.matmul(att, v), (0, 2, 1, 3))
    return wo(dc.reshape(out, (b, n, d)))


class TransformerLayer:
    """Pre-norm block: x + attn(LN(x)), then x + mlp(LN(x))."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator,
                 ff_mult: int = 2):
        self.heads = heads
        self.wq = Linear(width, width, rng)
        self.wk = Linear(width, width, rng)
        self.wv = Linear(width, width, rng)
        self.wo = Linear(width, width, rng)
        self.ff = MLP([width, ff_mult * width, width], rng)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = x + multihead_attention(dc.layer_norm(x), self.wq, self.wk,
                                    self.wv, self.wo, self.heads, mask)
        return x + self.ff(dc.layer_norm(x))

    def params(self, prefix: str) -> dict:
        return merge_params(self.wq.params(f"{prefix}.wq"),
                            self.wk.params(f"{prefix}.wk"),
                            self.wv.params(f"{prefix}.wv"),
                            self.wo.params(f"{prefix}.wo"),
                            self.ff.params(f"{prefix}.ff"))


class CardinalityHead:
    """Classifier over set sizes 0..n_max given the conditioning embedding."""

    def __init__(self, embed: int, n_max: int, rng: np.random.Generator,
                 hidden: int = 128):
        self.n_max = n_max
        self.net = MLP([embed, hidden, n_max + 1], rng)

    def logits(self, h: Tensor) -> Tensor:
        return self.net(h)

    def predict(self, h: Tensor) -> np.ndarray:
        # posterior-mean size, rounded: neighbouring size classes share
        # probability mass, so the mean is a far lower-variance readout
        # than the argmax when per-class counts are small
        lg = self.logits(h).values
        p = np.exp(lg - lg.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        sizes = p @ np.arange(self.n_max + 1, dtype=np.float64)
        return np.rint(sizes).astype(np.int64)

    def loss(self, h: Tensor, sizes: np.ndarray) -> Tensor:
        sizes = np.asarray(sizes)
        if np.any(sizes > self.n_max):
            raise ValueError("target size exceeds classifier range")
        return dc.cross_entropy_logits(self.logits(h), sizes)

    def params(self, prefix: str = "cardinality") -> dict:
        return self.net.params(f"{prefix}.net")


class TSPN:
    """Transformer set prediction conditioned on an embedding."""

    def __init__(self, dim: int, embed: int, width: int,
                 rng: np.random.Generator, heads: int = 4, layers: int = 3,
                 shared: bool = True, ff_mult: int = 2):
        self.dim, self.embed, self.width = dim, embed, width
        self.alpha = Tensor(0.0, requires_grad=True)
        # softplus(raw) ~= 1 at this raw value, so sampling starts near N(0, 1)
        self.beta_raw = Tensor(np.log(np.e - 1.0), requires_grad=True)
        self.in_proj = Linear(dim + embed, width, rng)
        n_blocks = 1 if shared else layers
        self.blocks = [TransformerLayer(width, heads, rng) for _ in range(n_blocks)]
        self.n_layers = layers
        self.shared = shared
        self.out_proj = Linear(width, dim, rng)

    def sample_initial(self, sizes: np.ndarray, rng: np.random.Generator) -> Tensor:
        """Draw (B, max(sizes), dim) iid from N(alpha, softplus(beta_raw))."""
        n = int(np.max(sizes))
        eps = dc.constant(rng.standard_normal((len(sizes), n, self.dim)))
        return self.alpha + dc.sqrt(dc.softplus(self.beta_raw)) * eps

    def decode(self, h: Tensor, sizes, rng=None, initial=None) -> SetPrediction:
        sizes = np.asarray(sizes, dtype=np.int64)
        if np.any(sizes < 1):
            raise ValueError("set sizes must be at least 1")
        if initial is None:
            if rng is None:
                raise ValueError("decode needs an rng when no initial set given")
            initial = self.sample_initial(sizes, rng)
        b, n, _ = initial.shape
        mask = _mask_from_sizes(sizes, n)

        cond = dc.broadcast_to(dc.reshape(h, (b, 1, self.embed)),
                               (b, n, self.embed))
        x = self.in_proj(dc.concat([initial, cond], axis=-1))
        for i in range(self.n_layers):
            block = self.blocks[0] if self.shared else self.blocks[i]
            x = block(x, mask)
        points = self.out_proj(x)
        return SetPrediction(points, dc.constant(mask), sizes)

    def params(self, prefix: str = "tspn") -> dict:
        out = {f"{prefix}.alpha": self.alpha, f"{prefix}.beta_raw": self.beta_raw}
        out.update(self.in_proj.params(f"{prefix}.in_proj"))
        for i, blk in enumerate(self.blocks):
            out.update(blk.params(f"{prefix}.block{i}"))
        out.update(self.out_proj.params(f"{prefix}.out_proj"))
        return out


class DSPN:
    """Deep set prediction: decode by gradient descent on the set itself.

    The decoder owns a set encoder; decoding runs ``steps`` updates of the
    elements (and their presence logits) to pull the re-encoding toward the
    conditioning embedding. Everything stays on the graph, so outer training
    shapes both the encoder and the learned initial set.
    """

    def __init__(self, encoder, n_max: int, dim: int,
                 rng: np.random.Generator, steps: int = 10, inner_lr: float = 800.0,
                 threshold: float = 0.5):
        self.encoder = encoder
        self.n_max, self.dim = n_max, dim
        self.steps, self.inner_lr, self.threshold = steps, inner_lr, threshold
        init = np.concatenate([rng.uniform(0, 1, size=(n_max, dim)),
                               rng.normal(0, 0.5, size=(n_max, 1))], axis=1)
        self.x0 = Tensor(init, requires_grad=True)

    def _encode_state(self, state: Tensor) -> Tensor:
        pts = dc.take(state, np.arange(self.dim), axis=-1)
        logit = dc.take(state, np.array([self.dim]), axis=-1)
        feats = dc.concat([pts, dc.sigmoid(logit)], axis=-1)
        return self.encoder(feats)

    def decode(self, h: Tensor, steps: int | None = None,
               return_trace: bool = False):
        steps = self.steps if steps is None else steps
        b = h.shape[0]
        state = dc.broadcast_to(
            dc.reshape(self.x0, (1, self.n_max, self.dim + 1)),
            (b, self.n_max, self.dim + 1))
        trace = []
        for k in range(steps):
            h_hat = self._encode_state(state)
            inner = dc.reduce_sum(setloss.repr_loss(h, h_hat))
            if return_trace:
                trace.append(inner.item())
            try:
                g = dc.grad(inner, [state])[0]
            except dc.NonFiniteError as exc:
                raise dc.NonFiniteError(
                    f"non-finite inner gradient at step {k}: {exc}") from exc
            state = state - self.inner_lr * g
        h_final = self._encode_state(state)
        if return_trace:
            trace.append(dc.reduce_sum(setloss.repr_loss(h, h_final)).item())

        points = dc.take(state, np.arange(self.dim), axis=-1)
        logits = dc.reshape(dc.take(state, np.array([self.dim]), axis=-1),
                            (b, self.n_max))
        presence = dc.sigmoid(logits)
        sizes = (presence.values > self.threshold).sum(axis=1)
        pred = SetPrediction(points, presence, sizes)
        if return_trace:
            return pred, h_final, trace
        return pred, h_final

    def params(self, prefix: str = "dspn") -> dict:
        out = {f"{prefix}.x0": self.x0}
        out.update(self.encoder.params(f"{prefix}.encoder"))
        return out


class CDSPN:
    """DSPN with oracle cardinality: no presence channel, the given size
    selects how many of the learned initial elements take part."""

    def __init__(self, encoder, n_max: int, dim: int,
                 rng: np.random.Generator, steps: int = 10,
                 inner_lr: float = 800.0):
        self.encoder = encoder
        self.n_max, self.dim = n_max, dim
        self.steps, self.inner_lr = steps, inner_lr
        self.x0 = Tensor(rng.uniform(0, 1, size=(n_max, dim)), requires_grad=True)

    def decode(self, h: Tensor, sizes, steps: int | None = None,
               return_trace: bool = False):
        sizes = np.asarray(sizes, dtype=np.int64)
        if np.any(sizes < 1) or np.any(sizes > self.n_max):
            raise ValueError("sizes out of range for this decoder")
        steps = self.steps if steps is None else steps
        b = h.shape[0]
        n = int(np.max(sizes))
        mask = _mask_from_sizes(sizes, n)
        mask_t = dc.constant(mask[:, :, None])

        state = dc.broadcast_to(dc.reshape(dc.take(self.x0, np.arange(n), axis=0),
                                           (1, n, self.dim)), (b, n, self.dim))
        trace = []
        for k in range(steps):
            h_hat = self.encoder(state, mask)
            inner = dc.reduce_sum(setloss.repr_loss(h, h_hat))
            if return_trace:
                trace.append(inner.item())
            try:
                g = dc.grad(inner, [state])[0]
            except dc.NonFiniteError as exc:
                raise dc.NonFiniteError(
                    f"non-finite inner gradient at step {k}: {exc}") from exc
            state = state - self.inner_lr * (g * mask_t)
        h_final = self.encoder(state, mask)
        if return_trace:
            trace.append(dc.reduce_sum(setloss.repr_loss(h, h_final)).item())

        pred = SetPrediction(state, dc.constant(mask), sizes)
        if return_trace:
            return pred, h_final, trace
        return pred, h_final

    def params(self, prefix: str = "cdspn") -> dict:
        out = {f"{prefix}.x0": self.x0}
        out.update(self.encoder.params(f"{prefix}.encoder"))
        return out
