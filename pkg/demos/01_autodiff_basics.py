"""
Reverse-mode differentiation with the numpy tensor
==================================================

Build a small expression, run backward, and compare against central
differences.
"""

import numpy as np

from mpcm import tensor as T
from mpcm.tensor import Tensor, grad_check

rng = np.random.default_rng(0)

# a tensor that records gradients, and a fixed matrix
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = rng.normal(size=(4, 2))

# tanh(x @ w), summed to a scalar
loss = T.tanh(x @ w).sum()
T.backward(loss)
print("loss:", loss.item())
print("d loss / d x:\n", x.grad)

# the analytic gradient agrees with finite differences
print(grad_check(lambda v: T.tanh(v @ w).sum(), x.data))

# cosine similarity stays in [-1, 1] and is zero for a zero vector
a = Tensor(np.array([[3.0, 4.0], [0.0, 0.0]]))
b = Tensor(np.array([[4.0, 3.0], [1.0, 1.0]]))
print("cosines:", T.cosine_similarity(a, b, axis=-1).data)

# masked softmax puts exactly zero mass on padding
scores = Tensor(np.array([[2.0, 1.0, 0.5, 9.0]]))
mask = np.array([[True, True, True, False]])
print("softmax:", T.masked_softmax(scores, mask).data)

# max pooling passes its gradient to the first maximum only
v = Tensor(np.array([[1.0], [3.0], [3.0]]), requires_grad=True)
T.backward(T.pool_max(v, np.ones(3, dtype=bool), axis=0).sum())
print("pool_max gradient:", v.grad.ravel())
