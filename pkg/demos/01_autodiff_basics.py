"""Walk through the tape-based autodiff core on a toy expression.

Builds y = mean(relu(X @ W + b)**2), backpropagates, and checks one
gradient entry against a central finite difference.
"""

import numpy as np

import cytograd.tensor as T
from cytograd.tensor import Graph, backward

rng = np.random.default_rng(0)
x_val = rng.normal(size=(4, 3))
w_val = rng.normal(size=(3, 2))
b_val = rng.normal(size=(2,))

g = Graph()
x = g.leaf(x_val)
w = g.leaf(w_val)
b = g.leaf(b_val)

h = T.relu(T.dense(x, w, b))
y = T.mean_all(T.mul(h, h))
print(f"forward value y = {y.values.item():.6f}")
print(f"tape length: {len(g)} nodes")

grads = backward(y, [w, b])
dw = grads[w.node_id].values
db = grads[b.node_id].values
print(f"dy/dw shape {dw.shape}, dy/db = {db}")

# finite-difference spot check on w[0, 0]
eps = 1e-6
def f(w00: float) -> float:
    w_pert = w_val.copy()
    w_pert[0, 0] = w00
    g2 = Graph()
    h2 = T.relu(T.dense(g2.leaf(x_val), g2.leaf(w_pert), g2.leaf(b_val)))
    return T.mean_all(T.mul(h2, h2)).values.item()

numeric = (f(w_val[0, 0] + eps) - f(w_val[0, 0] - eps)) / (2 * eps)
print(f"analytic dy/dw[0,0] = {dw[0, 0]:.8f}")
print(f"numeric  dy/dw[0,0] = {numeric:.8f}")
assert abs(numeric - dw[0, 0]) < 1e-6
print("central difference agrees.")
