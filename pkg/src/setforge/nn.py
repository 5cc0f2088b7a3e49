"""Small parametric building blocks on top of diffcore.

There is no module magic here: every block exposes ``params(prefix)``
returning a flat name->Tensor dict, and those dicts merge into the single
parameter tree that the optimiser and checkpoints see.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


def glorot(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True):
        self.w = Tensor(glorot(rng, d_in, d_out), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x) -> Tensor:
        out = dc.matmul(x, self.w)
        return out + self.b if self.b is not None else out

    def params(self, prefix: str) -> dict:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class MLP:
    """Linear stack with ReLU between layers (none after the last)."""

    def __init__(self, widths: list, rng: np.random.Generator):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.layers = [Linear(widths[i], widths[i + 1], rng)
                       for i in range(len(widths) - 1)]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = dc.relu(x)
        return x

    def params(self, prefix: str) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.{i}"))
        return out


def merge_params(*dicts) -> dict:
    out = {}
    for d in dicts:
        for k, v in d.items():
            if k in out:
                raise ValueError(f"duplicate parameter name {k!r}")
            out[k] = v
    return out


def count_params(params: dict, exclude_prefixes=()) -> int:
    total = 0
    for name, t in params.items():
        if any(name.startswith(p) for p in exclude_prefixes):
            continue
        total += t.size
    return total


def load_into(params: dict, arrays: dict) -> None:
    """Copy checkpoint arrays into live parameter tensors, checking shapes."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ValueError(f"parameter mismatch: missing={sorted(missing)[:4]} "
                         f"extra={sorted(extra)[:4]}")
    for name, t in params.items():
        a = np.asarray(arrays[name], dtype=np.float64)
        if a.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {a.shape} vs {t.shape}")
        t.values = a
