"""Differentiable operations on :class:`~mstkd.autodiff.tensor.Tensor`.

Elementwise binary operations require identical shapes; the only implicit
broadcast is tensor-with-python-scalar.  Everything else goes through
:func:`broadcast_to`, whose backward sums over the expanded axes.
"""

from __future__ import annotations

from enum import Enum
from numbers import Number
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import Function, ShapeError, Tensor, as_tensor


class AxisReduceMode(str, Enum):
    MAX = "max"
    MIN = "min"
    MEAN = "mean"


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        return g, g


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g):
        return g, -g


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        return g / self.b, -g * self.a / (self.b * self.b)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class AddScalar(Function):
    def forward(self, a, c):
        return a + c

    def backward(self, g):
        return (g,)


class MulScalar(Function):
    def forward(self, a, c):
        self.c = c
        return a * c

    def backward(self, g):
        return (g * self.c,)


class Exp(Function):
    def forward(self, a):
        with np.errstate(over="ignore"):
            self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise ValueError("log: input must be strictly positive")
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Square(Function):
    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, g):
        return (2.0 * g * self.a,)


class Sqrt(Function):
    def forward(self, a):
        if np.any(a < 0):
            raise ValueError("sqrt: input must be non-negative")
        self.out = np.sqrt(a)
        return self.out

    def backward(self, g):
        # subgradient 0 at the kink keeps sqrt(0) finite under backprop
        safe = np.where(self.out > 0, self.out, 1.0)
        return (np.where(self.out > 0, g / (2.0 * safe), 0.0),)


class Sigmoid(Function):
    def forward(self, a):
        self.out = _sigmoid(a)
        return self.out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class LeakyRelu(Function):
    def forward(self, a, slope=0.0):
        self.slope = slope
        self.pos = a > 0
        return np.where(self.pos, a, slope * a)

    def backward(self, g):
        return (np.where(self.pos, g, self.slope * g),)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def add(a, b) -> Tensor:
    if isinstance(b, Number):
        return AddScalar.apply(as_tensor(a), c=float(b))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    if isinstance(b, Number):
        return AddScalar.apply(as_tensor(a), c=-float(b))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    if isinstance(b, Number):
        return MulScalar.apply(as_tensor(a), c=float(b))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    if isinstance(b, Number):
        if b == 0:
            raise ZeroDivisionError("div by scalar zero")
        return MulScalar.apply(as_tensor(a), c=1.0 / float(b))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "div")
    return Div.apply(a, b)


def neg(a) -> Tensor:
    return Neg.apply(as_tensor(a))


def exp(a) -> Tensor:
    return Exp.apply(as_tensor(a))


def log(a) -> Tensor:
    return Log.apply(as_tensor(a))


def square(a) -> Tensor:
    return Square.apply(as_tensor(a))


def sqrt(a) -> Tensor:
    return Sqrt.apply(as_tensor(a))


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(as_tensor(a))


def relu(a) -> Tensor:
    return LeakyRelu.apply(as_tensor(a), slope=0.0)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    return LeakyRelu.apply(as_tensor(a), slope=slope)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ self.b.T, self.a.T @ g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    return MatMul.apply(a, b)


# ---------------------------------------------------------------------------
# softmax and reductions
# ---------------------------------------------------------------------------


class Softmax(Function):
    def forward(self, a, axis):
        self.axis = axis
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, a, axis):
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse
        self.soft = np.exp(out)
        return out

    def backward(self, g):
        return (g - self.soft * g.sum(axis=self.axis, keepdims=True),)


def softmax(t, axis: int) -> Tensor:
    t = as_tensor(t)
    return Softmax.apply(t, axis=_norm_axis(axis, t.ndim))


def log_softmax(t, axis: int) -> Tensor:
    t = as_tensor(t)
    return LogSoftmax.apply(t, axis=_norm_axis(axis, t.ndim))


class Reduce(Function):
    def forward(self, a, axis, mode):
        self.axis, self.mode, self.in_shape = axis, mode, a.shape
        if mode is AxisReduceMode.MEAN:
            return a.mean(axis=axis)
        # argmax/argmin return the first attaining index along the axis
        idx = a.argmax(axis=axis) if mode is AxisReduceMode.MAX else a.argmin(axis=axis)
        self.idx = np.expand_dims(idx, axis)
        return np.take_along_axis(a, self.idx, axis=axis).squeeze(axis)

    def backward(self, g):
        g = np.expand_dims(g, self.axis)
        if self.mode is AxisReduceMode.MEAN:
            n = self.in_shape[self.axis]
            return (np.broadcast_to(g / n, self.in_shape).copy(),)
        out = np.zeros(self.in_shape, dtype=g.dtype)
        np.put_along_axis(out, self.idx, g, axis=self.axis)
        return (out,)


def reduce(t, axis: int, mode: Union[AxisReduceMode, str]) -> Tensor:
    t = as_tensor(t)
    return Reduce.apply(t, axis=_norm_axis(axis, t.ndim), mode=AxisReduceMode(mode))


class Sum(Function):
    def forward(self, a, axis):
        self.axis, self.in_shape = axis, a.shape
        return np.asarray(a.sum(axis=axis))

    def backward(self, g):
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.in_shape).copy(),)


def sum(t, axis: Optional[int] = None) -> Tensor:
    t = as_tensor(t)
    if axis is not None:
        axis = _norm_axis(axis, t.ndim)
    return Sum.apply(t, axis=axis)


def mean(t, axis: Optional[int] = None) -> Tensor:
    t = as_tensor(t)
    if axis is None:
        return sum(t) * (1.0 / t.size)
    return reduce(t, axis, AxisReduceMode.MEAN)


def global_max_pool(t) -> Tensor:
    """Max over all spatial axes of a ``(C, *spatial)`` tensor, giving ``(C,)``."""
    t = as_tensor(t)
    flat = reshape(t, (t.shape[0], -1))
    return reduce(flat, 1, AxisReduceMode.MAX)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, g):
        return (np.ascontiguousarray(np.transpose(g, np.argsort(self.axes))),)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, self.bounds, axis=self.axis))


class Take(Function):
    def forward(self, a, index):
        self.index, self.in_shape = index, a.shape
        return np.array(a[index])

    def backward(self, g):
        out = np.zeros(self.in_shape, dtype=g.dtype)
        np.add.at(out, self.index, g)
        return (out,)


class BroadcastTo(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        lead = len(shape) - a.ndim
        self.sum_axes = tuple(range(lead)) + tuple(
            lead + i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1
        )
        return np.broadcast_to(a, shape).copy()

    def backward(self, g):
        return (g.sum(axis=self.sum_axes).reshape(self.in_shape),)


def reshape(t, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    shape = tuple(int(s) for s in shape)
    try:
        np.empty(t.shape, dtype=np.bool_).reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {t.shape} into {shape}") from exc
    return Reshape.apply(t, shape=shape)


def transpose(t, axes: Optional[Sequence[int]] = None) -> Tensor:
    t = as_tensor(t)
    axes = tuple(reversed(range(t.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(t.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {t.ndim}")
    return Transpose.apply(t, axes=axes)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    axis = _norm_axis(axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref} along axis {axis}")
    return Concat.apply(*tensors, axis=axis)


def take(t, index) -> Tensor:
    return Take.apply(as_tensor(t), index=index)


def broadcast_to(t, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; extents of 1 (or missing leading axes) are expanded."""
    t = as_tensor(t)
    shape = tuple(int(s) for s in shape)
    lead = len(shape) - t.ndim
    if lead < 0 or any(n not in (1, shape[lead + i]) for i, n in enumerate(t.shape)):
        raise ShapeError(f"broadcast_to: cannot expand {t.shape} to {shape}")
    return BroadcastTo.apply(t, shape=shape)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


class Normalize(Function):
    """Zero-mean, unit-variance over ``axes`` (no affine part)."""

    def forward(self, a, axes, eps):
        self.axes = axes
        mu = a.mean(axis=axes, keepdims=True)
        xc = a - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.out = xc * self.inv
        return self.out

    def backward(self, g):
        y, ax = self.out, self.axes
        gm = g.mean(axis=ax, keepdims=True)
        gym = (g * y).mean(axis=ax, keepdims=True)
        return (self.inv * (g - gm - y * gym),)


def normalize(t, axes: Union[int, Tuple[int, ...]], eps: float = 1e-5) -> Tensor:
    t = as_tensor(t)
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(_norm_axis(a, t.ndim) for a in axes)
    return Normalize.apply(t, axes=axes, eps=eps)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer norm of an ``(N, K)`` tensor with a ``(K,)`` affine."""
    y = normalize(x, 1, eps)
    return y * broadcast_to(gain, x.shape) + broadcast_to(bias, x.shape)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape ``(N, in)`` and weight ``(in, out)``."""
    y = matmul(x, weight)
    if bias is not None:
        y = y + broadcast_to(bias, y.shape)
    return y


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else t.ndim + 1 + axis, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis)

