"""
The numerics core in five minutes
=================================

A tiny reverse-mode tape: every operation stores its parents and a closure
that maps the output gradient to input gradients.
"""

import numpy as np

from textinfomax import numerics as nx
from textinfomax.numerics import Tensor

# a leaf that wants gradients
w = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
x = Tensor(np.array([[0.2, 0.4]]))

# y = relu(x W^T), then a scalar loss
y = nx.relu(nx.matmul(x, w.T))
loss = (y * y).sum()
loss.backward()
print("loss", loss.item())
print("dloss/dw\n", w.grad)

# gradients accumulate across backward calls until cleared
before = w.grad.copy()
(y * y).sum().backward()
print("doubled:", np.allclose(w.grad, 2 * before))
w.grad = None

# %%
# Central differences are the oracle for every operation. Here a small
# conv -> batch norm -> relu -> pooled score chain is checked end to end.

rng = np.random.default_rng(0)
img = Tensor(rng.random((2, 3, 8, 8)))
kernel = Tensor(rng.normal(0, 0.3, (4, 3, 3, 3)), requires_grad=True)
gamma = Tensor(np.ones(4), requires_grad=True)
beta = Tensor(np.zeros(4), requires_grad=True)


def forward():
    h = nx.conv2d(img, kernel, stride=2, padding=1)     # [2,4,4,4]
    h = nx.relu(nx.batch_norm(h, gamma, beta))
    pooled = nx.pool_avg(h, 4, 4).reshape(2, 4)         # global average
    return nx.logsumexp(nx.matmul(pooled, pooled.T), axis=1).sum()


err = nx.check_gradients(forward, [kernel, gamma, beta], h=1e-5)
print(f"worst relative error vs finite differences: {err:.2e}")

# %%
# Non-finite values never propagate silently.
try:
    nx.log(Tensor(np.array([-1.0])))
except nx.NumericError as exc:
    print("caught:", exc)
