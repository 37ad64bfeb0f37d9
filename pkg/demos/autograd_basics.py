"""A tour of the reverse-mode tensor core.

Builds small graphs, backpropagates, and checks one gradient against
central finite differences. Runs in a couple of seconds.
"""

import numpy as np

from xlpretrain import autograd as ag
from xlpretrain.autograd import Tensor, default_dtype

# ---------------------------------------------------------------------
# 1. Tensors and a scalar chain rule
# ---------------------------------------------------------------------

x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
y = ag.tsum(ag.mul(x, x))  # y = sum(x^2), dy/dx = 2x
y.backward()
print("x       =", x.data)
print("dy/dx   =", x.grad, "(expected 2x)")

# ---------------------------------------------------------------------
# 2. A tiny computation with matmul, softmax, and cross entropy
# ---------------------------------------------------------------------

rng = np.random.default_rng(0)
w = Tensor(rng.normal(0, 0.1, size=(4, 3)), requires_grad=True)
inputs = Tensor(rng.normal(size=(2, 4)))
logits = ag.matmul(inputs, w)
targets = np.array([0, 2])
loss = ag.cross_entropy(logits, targets)
loss.backward()
print("\ncross entropy =", float(loss.data))
print("dL/dw row norms =", np.linalg.norm(w.grad, axis=1))

# ---------------------------------------------------------------------
# 3. Checking a gradient numerically
# ---------------------------------------------------------------------
# Everything below runs in float64 so the finite-difference comparison
# is meaningful.

with default_dtype(np.float64):
    w = Tensor(rng.normal(0, 0.1, size=(4, 3)), requires_grad=True)
    inputs = Tensor(rng.normal(size=(2, 4)))

    def f():
        return ag.cross_entropy(ag.matmul(inputs, w), targets)

    loss = f()
    loss.backward()
    analytic = w.grad.copy()

    eps = 1e-6
    numeric = np.zeros_like(analytic)
    for i in range(w.data.shape[0]):
        for j in range(w.data.shape[1]):
            keep = w.data[i, j]
            w.data[i, j] = keep + eps
            up = float(f().data)
            w.data[i, j] = keep - eps
            down = float(f().data)
            w.data[i, j] = keep
            numeric[i, j] = (up - down) / (2 * eps)

    err = np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8))
    print(f"\nmax relative gradient error vs finite differences: {err:.2e}")

# ---------------------------------------------------------------------
# 4. Layer norm keeps activations standardized
# ---------------------------------------------------------------------

h = Tensor(rng.normal(5.0, 3.0, size=(2, 8)))
g = Tensor(np.ones(8))
b = Tensor(np.zeros(8))
normed = ag.layer_norm(h, g, b)
print("\nlayer_norm output mean per row:", normed.data.mean(axis=-1))
print("layer_norm output std  per row:", normed.data.std(axis=-1))
