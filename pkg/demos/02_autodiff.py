"""
A tour of the autodiff core
===========================

The library trains everything with its own reverse-mode engine: float64
numpy arrays, a dynamic graph, and gradients that are themselves built
from ordinary ops (so you can differentiate through a gradient).
"""

import numpy as np

import setforge.diffcore as dc
from setforge.diffcore import Tensor

rng = np.random.default_rng(1)

# tensors wrap float64 arrays; requires_grad marks trainable leaves
w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
x = dc.constant(rng.normal(size=(5, 3)))

# ops compose like numpy; the graph is recorded as you go
y = dc.reduce_sum(dc.sigmoid(x @ w) ** 2)
(gw,) = dc.grad(y, [w])
print("dy/dw:\n", gw.values.round(3))

# check one entry against a central finite difference
def objective(mat):
    return np.sum((1.0 / (1.0 + np.exp(-(x.values @ mat)))) ** 2)

eps = 1e-6
probe = w.values.copy()
probe[0, 0] += eps
hi = objective(probe)
probe[0, 0] -= 2 * eps
lo = objective(probe)
print("finite diff:", (hi - lo) / (2 * eps), " autodiff:", gw.values[0, 0])

# --- gradients are graphs too -------------------------------------------------
#
# grad() emits forward ops, so a gradient can be differentiated again.
# This is what lets the DSPN decoder backpropagate through its inner
# gradient-descent loop.
v = Tensor(np.array([0.7, -0.2]), requires_grad=True)
f = dc.reduce_sum(v ** 2 * v)
(g,) = dc.grad(f, [v])          # 3 v^2, still a graph
h = dc.reduce_sum(g)
(gg,) = dc.grad(h, [v])          # 6 v
print("second derivative of sum(v^3):", gg.values, "(expect 6*v =", 6 * v.values, ")")

# --- training a tiny model ------------------------------------------------------
#
# Adam is provided by the library; parameters live in a flat name -> Tensor
# dict, gradients in a matching name -> array dict.
w1 = Tensor(rng.normal(scale=0.5, size=(1, 16)), requires_grad=True)
b1 = Tensor(np.zeros(16), requires_grad=True)
w2 = Tensor(rng.normal(scale=0.5, size=(16, 1)), requires_grad=True)
params = {"w1": w1, "b1": b1, "w2": w2}
opt = dc.Adam(params, lr=3e-2)

inputs = np.linspace(-2, 2, 64)[:, None]
targets = np.sin(2 * inputs)

for step in range(400):
    pred = dc.relu(dc.constant(inputs) @ w1 + b1) @ w2
    loss = dc.reduce_mean((pred - dc.constant(targets)) ** 2)
    grads = dc.grad(loss, list(params.values()), destroy=True)
    opt.step({k: g.values for k, g in zip(params, grads)})
    if step % 100 == 0:
        print(f"step {step:3d}  mse {loss.item():.5f}")

print("final fit mse:", loss.item())
