"""Reverse-mode automatic differentiation on float64 numpy arrays.

The graph is dynamic: every operation returns a new Tensor that remembers its
parents and a VJP closure. VJP closures build their results out of the same
primitive operations, so a gradient returned by :func:`grad` is itself a graph
node and can be differentiated again by a later backward pass. This is what
lets an unrolled inner optimisation loop (gradient steps on a set) remain
trainable end to end without a separate higher-order engine.

Data-dependent discrete choices (argmins, sort orders, clip masks, assignment
permutations) are captured as constants at the point of evaluation, i.e. the
subgradient is the one induced by the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

# Module-level switch for post-op finiteness checks. Cheap relative to the
# array math at the sizes this library runs at; leave on unless profiling
# says otherwise.
finite_checks = True


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or infinity while checks were enabled."""


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    Leaf tensors with ``requires_grad=True`` are parameters. Interior nodes
    carry ``_parents`` and ``_vjp`` only when some ancestor requires grad;
    otherwise they behave as constants and keep the graph small.

    Identity semantics: tensors hash and compare by object identity so they
    can key dicts during backward accumulation.
    """

    __slots__ = ("values", "requires_grad", "_parents", "_vjp", "op")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None
        self.op = "leaf"

    # -- convenience -------------------------------------------------------

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return self.values.item()

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return multiply(self, -1.0)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise ValueError("only power 2 is supported; compose exp/log for the rest")


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A tensor that never takes gradient, regardless of where it came from."""
    return Tensor(x.values if isinstance(x, Tensor) else x)


def detach(x: Tensor) -> Tensor:
    """Break the graph: same values, no history."""
    return Tensor(np.array(x.values))


def _make(op: str, values: np.ndarray, parents, vjp) -> Tensor:
    # single-pass probe: any nan/inf propagates into the sum
    if finite_checks and not np.isfinite(values.sum()):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    out.op = op
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce ``g`` back down to ``shape`` after a numpy-style broadcast."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = reduce_sum(g, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1
    )
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _make(
        "add",
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def subtract(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _make(
        "subtract",
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def multiply(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _make(
        "multiply",
        a.values * b.values,
        (a, b),
        lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    )


def divide(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = a.values / b.values
    return _make(
        "divide",
        vals,
        (a, b),
        lambda g: (
            _unbroadcast(g / b, a.shape),
            _unbroadcast(-(g * a) / square(b), b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")

    def vjp(g):
        ga = matmul(g, transpose(b, _swap_last(b.ndim)))
        gb = matmul(transpose(a, _swap_last(a.ndim)), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", a.values @ b.values, (a, b), vjp)


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def square(x) -> Tensor:
    x = astensor(x)
    return _make("square", x.values * x.values, (x,), lambda g: (g * x * 2.0,))


def sqrt(x) -> Tensor:
    x = astensor(x)
    out = _make("sqrt", np.sqrt(x.values), (x,), None)

    def vjp(g):
        return (g * 0.5 / out,)

    out._vjp = vjp if out.requires_grad else None
    return out


def exp(x) -> Tensor:
    x = astensor(x)
    out = _make("exp", np.exp(x.values), (x,), None)
    out._vjp = (lambda g: (g * out,)) if out.requires_grad else None
    return out


def log(x) -> Tensor:
    x = astensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.log(x.values)
    return _make("log", vals, (x,), lambda g: (g / x,))


def absolute(x) -> Tensor:
    x = astensor(x)
    sign = constant(np.sign(x.values))
    return _make("abs", np.abs(x.values), (x,), lambda g: (g * sign,))


def relu(x) -> Tensor:
    x = astensor(x)
    keep = constant((x.values > 0).astype(DTYPE))
    return _make("relu", np.maximum(x.values, 0.0), (x,), lambda g: (g * keep,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is 1 strictly inside, 0 outside."""
    x = astensor(x)
    inside = constant(((x.values > lo) & (x.values < hi)).astype(DTYPE))
    return _make("clip", np.clip(x.values, lo, hi), (x,), lambda g: (g * inside,))


def sigmoid(x) -> Tensor:
    x = astensor(x)
    v = x.values
    out_vals = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                        np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = _make("sigmoid", out_vals, (x,), None)
    out._vjp = (lambda g: (g * out * (1.0 - out),)) if out.requires_grad else None
    return out


def softplus(x) -> Tensor:
    """log(1 + e^x), computed stably; built from primitives so the gradient
    falls out of the graph."""
    x = astensor(x)
    return relu(x) + log(exp(-absolute(x)) + 1.0)


def softmax(x, axis: int = -1) -> Tensor:
    x = astensor(x)
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = _make("softmax", e / np.sum(e, axis=axis, keepdims=True), (x,), None)

    def vjp(g):
        inner = reduce_sum(g * out, axis=axis, keepdims=True)
        return ((g - inner) * out,)

    out._vjp = vjp if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# shape primitives


def reshape(x, shape) -> Tensor:
    x = astensor(x)
    old = x.shape
    return _make(
        "reshape", x.values.reshape(shape), (x,), lambda g: (reshape(g, old),)
    )


def transpose(x, axes=None) -> Tensor:
    x = astensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(
        "transpose", np.transpose(x.values, axes), (x,), lambda g: (transpose(g, inv),)
    )


def broadcast_to(x, shape) -> Tensor:
    x = astensor(x)
    old = x.shape
    return _make(
        "broadcast_to",
        np.broadcast_to(x.values, shape),
        (x,),
        lambda g: (_unbroadcast(g, old),),
    )


def concat(parts, axis: int = -1) -> Tensor:
    parts = [astensor(p) for p in parts]
    vals = [p.values for p in parts]
    axis_ = axis % vals[0].ndim
    sizes = [v.shape[axis_] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            take(g, np.arange(offsets[i], offsets[i + 1]), axis_)
            for i in range(len(parts))
        )

    return _make("concat", np.concatenate(vals, axis=axis_), tuple(parts), vjp)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along one axis with an integer index array (any shape).

    The backward pass scatter-adds, so repeated indices accumulate.
    """
    x = astensor(x)
    idx = np.asarray(indices)
    shape = x.shape

    def vjp(g):
        return (scatter_add(g, idx, axis, shape),)

    return _make("take", np.take(x.values, idx, axis=axis), (x,), vjp)


def scatter_add(src, indices, axis: int, out_shape) -> Tensor:
    """Dual of :func:`take`: add slices of ``src`` into a zero tensor."""
    src = astensor(src)
    idx = np.asarray(indices)

    out_vals = np.zeros(out_shape, dtype=DTYPE)
    key = (slice(None),) * (axis % len(out_shape)) + (idx,)
    np.add.at(out_vals, key, src.values)

    def vjp(g):
        return (take(g, idx, axis),)

    return _make("scatter_add", out_vals, (src,), vjp)


def take_along_axis(x, indices, axis: int, permutation: bool = False) -> Tensor:
    """numpy ``take_along_axis`` as a differentiable op.

    When ``permutation=True`` the caller asserts indices are a permutation
    along ``axis`` (e.g. a sort order), and the backward pass is the inverse
    gather instead of a scatter-add.
    """
    x = astensor(x)
    idx = np.asarray(indices)
    shape = x.shape

    if permutation:
        inv = np.argsort(idx, axis=axis)

        def vjp(g):
            return (take_along_axis(g, inv, axis, permutation=True),)

    else:

        def vjp(g):
            return (_scatter_along_axis(g, idx, axis, shape),)

    return _make(
        "take_along_axis", np.take_along_axis(x.values, idx, axis=axis), (x,), vjp
    )


def _scatter_along_axis(src: Tensor, idx: np.ndarray, axis: int, out_shape) -> Tensor:
    out_vals = np.zeros(out_shape, dtype=DTYPE)
    key = list(np.indices(idx.shape, sparse=True))
    key[axis] = idx
    np.add.at(out_vals, tuple(key), src.values)

    def vjp(g):
        return (take_along_axis(g, idx, axis),)

    return _make("scatter_along_axis", out_vals, (src,), vjp)


# ---------------------------------------------------------------------------
# reductions


def _as_axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = astensor(x)
    axes = _as_axis_tuple(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def vjp(g):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, shape),)

    return _make(
        "reduce_sum", np.sum(x.values, axis=axes, keepdims=keepdims), (x,), vjp
    )


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = astensor(x)
    axes = _as_axis_tuple(axis, x.ndim)
    n = float(np.prod([x.shape[a] for a in axes]))
    return reduce_sum(x, axis=axes, keepdims=keepdims) * (1.0 / n)


def _extreme_reduce(op, x, axis, keepdims, np_val, np_arg):
    x = astensor(x)
    if axis is None:
        flat = reshape(x, (x.size,))
        out = _extreme_reduce(op, flat, 0, False, np_val, np_arg)
        return reshape(out, (1,) * x.ndim) if keepdims else out
    axis = axis % x.ndim
    # ties resolve to the lowest index, matching np.argmin/argmax
    arg = np_arg(x.values, axis=axis)
    picked = take_along_axis(x, np.expand_dims(arg, axis), axis)
    return picked if keepdims else reshape(picked, arg.shape)


def reduce_min(x, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme_reduce("reduce_min", x, axis, keepdims, np.min, np.argmin)


def reduce_max(x, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme_reduce("reduce_max", x, axis, keepdims, np.max, np.argmax)


# ---------------------------------------------------------------------------
# ordering


def sort_descending(x, axis: int = -1):
    """Sort values descending along ``axis``.

    Returns ``(sorted_tensor, perm)`` where ``perm`` is the integer index
    array that produced the order. Ties keep the lower original index first,
    so the order (and therefore the subgradient) is deterministic. Gradients
    flow through the reordering as a fixed permutation.
    """
    x = astensor(x)
    perm = np.argsort(-x.values, axis=axis, kind="stable")
    return take_along_axis(x, perm, axis, permutation=True), perm


def mask_select(x, mask, axis: int = 0) -> Tensor:
    """Keep the rows of ``x`` where boolean ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 1:
        raise ValueError("mask_select expects a 1-D mask")
    return take(x, np.flatnonzero(mask), axis)


# ---------------------------------------------------------------------------
# composites


def layer_norm(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Normalise to zero mean and unit variance along ``axis``."""
    x = astensor(x)
    mu = reduce_mean(x, axis=axis, keepdims=True)
    centred = x - mu
    var = reduce_mean(square(centred), axis=axis, keepdims=True)
    return centred / sqrt(var + eps)


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = astensor(x)
    m = constant(np.max(x.values, axis=axis, keepdims=True))
    out = log(reduce_sum(exp(x - m), axis=axis, keepdims=True)) + m
    return out if keepdims else reshape(out, np.max(x.values, axis=axis).shape)


def cross_entropy_logits(logits, labels) -> Tensor:
    """Mean categorical cross-entropy. ``labels`` are integer class ids."""
    logits = astensor(logits)
    labels = np.asarray(labels)
    lse = logsumexp(logits, axis=-1)
    picked = take_along_axis(logits, labels[..., None], axis=-1)
    picked = reshape(picked, labels.shape)
    return reduce_mean(lse - picked)


# ---------------------------------------------------------------------------
# graph traversal and gradients


class Graph:
    """Topologically ordered view of the grad-relevant graph under ``root``."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order  # parents before children

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.requires_grad and not t._parents]


def grad(loss: Tensor, wrt, destroy: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    The returned tensors are graph nodes built from primitive ops, so they can
    take part in further differentiable computation. ``wrt`` entries are
    treated as independent variables: traversal does not continue past them.
    Tensors not reachable from the loss get zero gradients.

    With ``destroy`` each interior node's history is dropped as soon as its
    vjp has run, releasing the arrays captured by the closures. The peak
    memory of a training step shrinks considerably, but the graph cannot be
    differentiated again. Never use it on a graph someone else still needs
    (e.g. when emitting inner gradients that an outer loss will consume).
    """
    if loss.values.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    wrt = list(wrt)
    stop = {id(w) for w in wrt}

    acc: dict[int, Tensor] = {id(loss): Tensor(np.ones(loss.shape))}
    for node in reversed(Graph(loss).nodes):
        g = acc.get(id(node))
        if g is None or node._vjp is None or id(node) in stop:
            if destroy and id(node) not in stop:
                node._vjp, node._parents = None, ()
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            prev = acc.get(id(parent))
            acc[id(parent)] = pg if prev is None else add(prev, pg)
        del acc[id(node)]
        if destroy:
            node._vjp, node._parents = None, ()

    return [acc.get(id(w)) or Tensor(np.zeros(w.shape)) for w in wrt]


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Numeric gradients for every parameter leaf under ``loss``."""
    leaves = Graph(loss).leaves
    grads = grad(loss, leaves)
    return {leaf: g.values for leaf, g in zip(leaves, grads)}


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    """Adam moments plus step count; keyed like the parameter dict."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: dict, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0)
    for name, p in params.items():
        arr = p.values if isinstance(p, Tensor) else np.asarray(p, dtype=DTYPE)
        state.m[name] = np.zeros_like(arr)
        state.v[name] = np.zeros_like(arr)
    return state


def adam_step(state: AdamState, params: dict, grads: dict):
    """One Adam update. Pure: returns (new_params, new_state).

    ``params`` and ``grads`` map names to float64 arrays. Raises on non-finite
    gradients, naming the offending parameter.
    """
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, state.t + 1)
    t = new_state.t
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=DTYPE)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        new_state.m[name] = m
        new_state.v[name] = v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, new_state


class Adam:
    """Stateful wrapper over :func:`adam_step` for dicts of parameter Tensors."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = adam_init(params, lr, beta1, beta2, eps)

    def step(self, grads: dict):
        raw = {k: t.values for k, t in self.params.items()}
        new, self.state = adam_step(self.state, raw, grads)
        for k, t in self.params.items():
            t.values = new[k]


# ---------------------------------------------------------------------------
# deterministic, splittable randomness


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator; equal (seed, stream) always gives equal draws
    and distinct streams are statistically independent."""
    acc = 0
    mult = 0x9E3779B97F4A7C15
    for s in stream:
        acc = (acc * mult + s) % (1 << 64)
    key = np.array([seed % (1 << 64), acc], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
