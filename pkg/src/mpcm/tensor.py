"""Dense tensors with reverse-mode automatic differentiation.

Every operation on a :class:`Tensor` that requires gradients records its
parents and a backward rule.  Calling :meth:`Tensor.backward` on a scalar
orders the recorded graph topologically (the tape for that forward pass),
replays the rules in reverse and accumulates gradients on every reachable
tensor with ``requires_grad=True``.

Arithmetic defaults to double precision; ``set_default_dtype(np.float32)``
switches newly created tensors to single precision.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12

_default_dtype = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class InvalidInputError(ValueError):
    """Input violates an operation precondition (e.g. everything masked)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


def _as_array(data) -> np.ndarray:
    if isinstance(data, Tensor):
        return data.data
    arr = np.asarray(data)
    if arr.dtype.kind != "f":
        arr = arr.astype(_default_dtype)
    return arr


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over axes that broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-dimensional real array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- introspection --------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -----------------------------------------------------------------------------
# Elementwise arithmetic
# -----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), _backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), _backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), _backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def _backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), _backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._from_op(a.data**exponent, (a,), _backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split on sign to avoid overflow in exp
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp_min(a, low: float) -> Tensor:
    """``max(a, low)``; the gradient is zero where the floor is active."""
    a = as_tensor(a)
    keep = a.data >= low
    return Tensor._from_op(np.where(keep, a.data, low), (a,), lambda g: (g * keep,))


def clip(a, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    keep = (a.data >= low) & (a.data <= high)
    return Tensor._from_op(np.clip(a.data, low, high), (a,), lambda g: (g * keep,))


def rsqrt_safe(a, eps: float = NORM_EPS) -> Tensor:
    """``a ** -0.5`` for squared norms, returning 0 (with zero gradient)
    wherever ``sqrt(a) < eps``."""
    a = as_tensor(a)
    live = a.data >= eps * eps
    out = np.zeros_like(a.data)
    out[live] = a.data[live] ** -0.5

    def _backward(g):
        return (g * (-0.5) * out**3,)

    return Tensor._from_op(out, (a,), _backward)


def where(mask, a, b) -> Tensor:
    """Select from ``a`` where the (constant) boolean mask is true, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def _backward(g):
        ga = unbroadcast(np.where(mask, g, 0.0), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.where(mask, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(np.where(mask, a.data, b.data), (a, b), _backward)


# -----------------------------------------------------------------------------
# Reductions and shape manipulation
# -----------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims).copy(),)

    return Tensor._from_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), _backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)

    def _backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return Tensor._from_op(out, (a,), _backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


class _IndexedGrad:
    """Gradient that is zero except at ``index``; accumulated in place."""

    __slots__ = ("index", "values", "shape", "dtype")

    def __init__(self, index, values, shape, dtype):
        self.index, self.values, self.shape, self.dtype = index, values, shape, dtype

    def add_into(self, buf: np.ndarray) -> None:
        if _is_basic_index(self.index):
            buf[self.index] += self.values
        else:
            np.add.at(buf, self.index, self.values)

    def dense(self) -> np.ndarray:
        buf = np.zeros(self.shape, dtype=self.dtype)
        self.add_into(buf)
        return buf


def getitem(a, index) -> Tensor:
    """Basic slicing or integer-array gathering; gradients scatter-add back."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    def _backward(g):
        return (_IndexedGrad(index, g, a.shape, a.data.dtype),)

    return Tensor._from_op(np.array(out, copy=True), (a,), _backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (rows with ``axis=0``, columns with ``axis=-1``)."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidInputError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def _backward(g):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return Tensor._from_op(out, tensors, _backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def _backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return Tensor._from_op(out, tensors, _backward)


def broadcast_rows(v, n: int) -> Tensor:
    """Repeat a length-d vector as the rows of an n×d matrix."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise DimensionError(f"broadcast_rows expects a vector, got shape {v.shape}")
    out = np.broadcast_to(v.data, (n, v.shape[0])).copy()
    return Tensor._from_op(out, (v,), lambda g: (g.sum(axis=0),))


# -----------------------------------------------------------------------------
# Linear algebra
# -----------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules for leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    flat = b.ndim == 2  # fold a's leading axes into one GEMM
    if flat:
        k, n = b.shape
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = np.matmul(a.data, b.data)

    def _backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), _backward)


def einsum(subscripts: str, *operands) -> Tensor:
    """Explicit-output einsum (``'ij,jk->ik'``) without ellipses or diagonals."""
    operands = [as_tensor(t) for t in operands]
    if "->" not in subscripts or "." in subscripts:
        raise InvalidInputError("einsum needs explicit '->' output and no ellipsis")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise InvalidInputError(f"einsum expects {len(in_subs)} operands, got {len(operands)}")
    for sub_, op in zip(in_subs, operands):
        if len(sub_) != op.ndim:
            raise DimensionError(f"einsum subscript {sub_!r} does not match shape {op.shape}")
        if len(set(sub_)) != len(sub_):
            raise InvalidInputError(f"repeated index in einsum operand {sub_!r}")
    optimize = len(operands) > 2
    out = np.einsum(subscripts, *(t.data for t in operands), optimize=optimize)

    def _backward(g):
        grads = []
        for i, (sub_i, op_i) in enumerate(zip(in_subs, operands)):
            if not op_i.requires_grad:
                grads.append(None)
                continue
            others = [s for j, s in enumerate(in_subs) if j != i]
            arrays = [t.data for j, t in enumerate(operands) if j != i]
            available = set(out_sub).union(*others)
            kept = "".join(c for c in sub_i if c in available)
            expr = ",".join([out_sub] + others) + "->" + kept
            gi = np.einsum(expr, g, *arrays, optimize=len(arrays) > 1)
            if kept != sub_i:
                missing = [k for k, c in enumerate(sub_i) if c not in available]
                gi = np.broadcast_to(np.expand_dims(gi, missing), op_i.shape).copy()
            grads.append(gi)
        return tuple(grads)

    return Tensor._from_op(out, operands, _backward)


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (g * np.where(out > 0, a.data / safe, 0.0),)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return Tensor._from_op(res, (a,), _backward)


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine along ``axis`` with broadcasting over the remaining axes.

    Where either norm is below ``NORM_EPS`` the result is 0 and no gradient
    flows.  Values are clipped into [-1, 1] to absorb rounding.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[axis] != b.shape[axis]:
        raise DimensionError(f"cosine operands differ in length: {a.shape} vs {b.shape}")
    dot = np.sum(a.data * b.data, axis=axis, keepdims=True)
    na = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    nb = np.sqrt(np.sum(b.data * b.data, axis=axis, keepdims=True))
    live = (na >= NORM_EPS) & (nb >= NORM_EPS)
    inv_a = np.where(live, 1.0 / np.where(live, na, 1.0), 0.0)
    inv_b = np.where(live, 1.0 / np.where(live, nb, 1.0), 0.0)
    cos = np.clip(dot * inv_a * inv_b, -1.0, 1.0)

    def _backward(g):
        g = np.expand_dims(g, axis)
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g * (b.data * inv_a * inv_b - cos * a.data * inv_a**2), a.shape)
        if b.requires_grad:
            gb = unbroadcast(g * (a.data * inv_a * inv_b - cos * b.data * inv_b**2), b.shape)
        return ga, gb

    return Tensor._from_op(np.squeeze(cos, axis=axis), (a, b), _backward)


def cosine_matrix(a, b) -> Tensor:
    """All-pairs cosine: ``a`` (..., N, d) and ``b`` (..., M, d) give (..., N, M).

    Rows with norm below ``NORM_EPS`` score 0 against everything.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_matrix operands differ in width: {a.shape} vs {b.shape}")
    na = np.sqrt(np.sum(a.data * a.data, axis=-1))
    nb = np.sqrt(np.sum(b.data * b.data, axis=-1))
    ia = np.where(na >= NORM_EPS, 1.0 / np.where(na >= NORM_EPS, na, 1.0), 0.0)
    ib = np.where(nb >= NORM_EPS, 1.0 / np.where(nb >= NORM_EPS, nb, 1.0), 0.0)
    scale = ia[..., :, None] * ib[..., None, :]
    cos = np.clip(np.matmul(a.data, np.swapaxes(b.data, -1, -2)) * scale, -1.0, 1.0)

    def _backward(g):
        gs = g * scale
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(gs, b.data) - (np.sum(g * cos, axis=-1) * ia * ia)[..., None] * a.data
            ga = unbroadcast(ga, a.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(gs, -1, -2), a.data) - (np.sum(g * cos, axis=-2) * ib * ib)[..., None] * b.data
            gb = unbroadcast(gb, b.shape)
        return ga, gb

    return Tensor._from_op(cos, (a, b), _backward)


def cosine(v1, v2) -> Tensor:
    """Cosine similarity of two equal-length vectors (scalar tensor)."""
    v1, v2 = as_tensor(v1), as_tensor(v2)
    if v1.ndim != 1 or v2.ndim != 1 or v1.shape != v2.shape:
        raise DimensionError(f"cosine expects equal-length vectors, got {v1.shape} and {v2.shape}")
    return cosine_similarity(v1, v2, axis=0)


# -----------------------------------------------------------------------------
# Masked normalisation and pooling
# -----------------------------------------------------------------------------


def _align_mask(mask, values: np.ndarray, axis: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim < values.ndim:
        # a 1-d mask runs along `axis`
        if mask.ndim == 1:
            shape = [1] * values.ndim
            shape[axis % values.ndim] = mask.shape[0]
            mask = mask.reshape(shape)
        else:
            mask = mask.reshape(mask.shape + (1,) * (values.ndim - mask.ndim))
    try:
        return np.broadcast_to(mask, values.shape)
    except ValueError:
        raise DimensionError(f"mask shape {mask.shape} does not fit values {values.shape}") from None


def masked_softmax(logits, mask, axis: int = -1) -> Tensor:
    """Softmax over unmasked entries; masked entries are exactly 0."""
    logits = as_tensor(logits)
    m = _align_mask(mask, logits.data, axis)
    if not np.all(np.any(m, axis=axis)):
        raise InvalidInputError("masked_softmax: every position is masked in some slice")
    shifted = np.where(m, logits.data, -np.inf)
    shifted = shifted - np.max(shifted, axis=axis, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (logits,), _backward)


def pool_max(values, mask, axis: int = 0) -> Tensor:
    """Max over unmasked entries along ``axis``; ties route gradient to the first."""
    values = as_tensor(values)
    m = _align_mask(mask, values.data, axis)
    if not np.all(np.any(m, axis=axis)):
        raise InvalidInputError("pool_max: every row is masked")
    filled = np.where(m, values.data, -np.inf)
    idx = np.expand_dims(np.argmax(filled, axis=axis), axis)
    out = np.take_along_axis(values.data, idx, axis=axis)

    def _backward(g):
        full = np.zeros_like(values.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._from_op(np.squeeze(out, axis=axis), (values,), _backward)


def pool_mean(values, mask, axis: int = 0) -> Tensor:
    """Mean over unmasked entries along ``axis`` (divides by the live count)."""
    values = as_tensor(values)
    m = _align_mask(mask, values.data, axis)
    count = np.sum(m, axis=axis, keepdims=True)
    if np.any(count == 0):
        raise InvalidInputError("pool_mean: every row is masked")
    weights = m / count
    out = np.sum(values.data * weights, axis=axis)

    def _backward(g):
        return (np.expand_dims(g, axis) * weights,)

    return Tensor._from_op(out, (values,), _backward)


# -----------------------------------------------------------------------------
# Dropout
# -----------------------------------------------------------------------------


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise InvalidInputError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep.astype(_default_dtype) / (1.0 - rate)


def apply_mask(x, mask: np.ndarray) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (unbroadcast(g * mask, x.shape),))


def dropout(x, rate: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    x = as_tensor(x)
    if not training or rate == 0.0 or rng is None:
        return x
    return apply_mask(x, dropout_mask(x.shape, rate, rng))


# -----------------------------------------------------------------------------
# Backpropagation
# -----------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, free_graph: bool = True) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.data.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise InvalidInputError("loss does not depend on any tensor requiring gradients")
    tape = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    owned = set()  # keys whose buffers are private and may be updated in place
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(g, _IndexedGrad):
            g = g.dense()
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            if isinstance(pg, _IndexedGrad):
                if prev is None:
                    grads[key] = pg.dense()
                    owned.add(key)
                    continue
                if isinstance(prev, _IndexedGrad):
                    prev = prev.dense()
                elif key not in owned:
                    prev = prev.copy()
                pg.add_into(prev)
                grads[key] = prev
                owned.add(key)
            elif prev is None:
                grads[key] = pg
            else:
                if isinstance(prev, _IndexedGrad):
                    prev = prev.dense()
                grads[key] = prev + pg
                owned.add(key)
        if free_graph:
            node._parents = ()
            node._backward = None


# -----------------------------------------------------------------------------
# Finite-difference gradient checking
# -----------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic and central-difference gradients."""

    max_rel_error: float
    rel_errors: dict
    passed: bool
    tol: float
    step: float

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict}: max relative error {self.max_rel_error:.3e} (tol {self.tol:g}, step {self.step:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps 0/0 coordinates defined."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Check analytic gradients of ``loss_fn()`` w.r.t. every tensor in ``params``.

    ``loss_fn`` is re-evaluated with each coordinate nudged by ``±step`` in
    place, so it must read the parameters from the same tensor objects.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite at the check point")
    backward(loss)
    errors = {}
    worst = 0.0
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        if not np.isfinite(analytic).all():
            raise NumericError(f"non-finite analytic gradient for {name}")
        err = relative_error(analytic, numeric, floor)
        errors[name] = float(err.max()) if err.size else 0.0
        worst = max(worst, errors[name])
    return GradCheckReport(worst, errors, worst < tol, tol, step)


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the gradient of scalar ``f`` at ``point`` with central differences."""
    x = Tensor(np.array(_as_array(point), dtype=np.float64, copy=True), requires_grad=True, name="x")
    return grad_check_params(lambda: f(x), {"x": x}, step=step, tol=tol, floor=floor)


__all__ = [
    "Tensor",
    "DimensionError",
    "InvalidInputError",
    "NumericError",
    "GradCheckReport",
    "add",
    "apply_mask",
    "as_tensor",
    "backward",
    "broadcast_rows",
    "clamp_min",
    "clip",
    "concat",
    "cosine",
    "cosine_matrix",
    "cosine_similarity",
    "div",
    "dropout",
    "dropout_mask",
    "einsum",
    "exp",
    "get_default_dtype",
    "getitem",
    "grad_check",
    "grad_check_params",
    "l2_norm",
    "log",
    "masked_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "pool_max",
    "pool_mean",
    "power",
    "relative_error",
    "reshape",
    "rsqrt_safe",
    "set_default_dtype",
    "sigmoid",
    "sqrt",
    "stack",
    "sub",
    "tanh",
    "transpose",
    "tsum",
    "unbroadcast",
    "where",
]
