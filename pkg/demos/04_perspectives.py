"""
What a matching perspective does
================================

Each perspective row reweights the dimensions before a cosine is taken, so
two vectors can look identical from one perspective and opposite from
another.
"""

import numpy as np

from mpcm.model import multi_perspective_match

v1 = np.array([1.0, 5.0])
v2 = np.array([1.0, -5.0])

perspectives = np.array([
    [1.0, 1.0],  # plain cosine
    [1.0, 0.0],  # look only at the first dimension
    [0.0, 1.0],  # look only at the second
    [0.0, 0.0],  # sees nothing: defined as 0
])
for w, m in zip(perspectives, multi_perspective_match(v1, v2, perspectives).data):
    print(f"W_k = {w}:  m_k = {m:+.4f}")

# with many random perspectives the matching vector describes the pair
# in far more detail than the single plain cosine
rng = np.random.default_rng(0)
a, b = rng.normal(size=100), rng.normal(size=100)
many = multi_perspective_match(a, b, rng.uniform(-0.1, 0.1, size=(50, 100))).data
print(f"\n50 perspectives: min {many.min():+.3f}, max {many.max():+.3f}, plain cosine {a @ b / np.linalg.norm(a) / np.linalg.norm(b):+.3f}")
