"""Volumetric operations on NCDHW tensors: conv3d, nearest upsampling, average pooling."""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Function, ShapeError, Tensor, as_tensor


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


class Conv3d(Function):
    """Cross-correlation with zero padding; weight is ``(C_out, C_in, k, k, k)``.

    The input is unfolded once into a ``(positions, C_in * k^3)`` column
    matrix that both the forward product and the weight gradient reuse.
    """

    def forward(self, x, w, *maybe_bias, stride, padding):
        self.stride, self.padding, self.w = stride, padding, w
        n, cin = x.shape[:2]
        k = w.shape[-1]
        if padding:
            p = padding
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
        self.padded_shape = x.shape
        win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
        self.out_spatial = win.shape[2:5]
        # (N, Do, Ho, Wo, C_in, k, k, k) flattened to columns
        self.cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
            n * int(np.prod(self.out_spatial)), cin * k**3
        )
        out = self.cols @ w.reshape(w.shape[0], -1).T
        if maybe_bias:
            out += maybe_bias[0]
        self.has_bias = bool(maybe_bias)
        out = out.reshape((n,) + self.out_spatial + (w.shape[0],))
        return np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def backward(self, g):
        s, w = self.stride, self.w
        cout, cin, k = w.shape[0], w.shape[1], w.shape[-1]
        n = g.shape[0]
        gmat = np.moveaxis(g, 1, -1).reshape(-1, cout)
        dw = (gmat.T @ self.cols).reshape(w.shape)
        # column gradient laid out (C_in, k, k, k, N, Do, Ho, Wo) so each offset slice is contiguous
        do, ho, wo = self.out_spatial
        gcols = (w.reshape(cout, -1).T @ gmat.T).reshape((cin, k, k, k, n, do, ho, wo))
        pn, pc, *pad_sp = self.padded_shape
        dxp = np.zeros((pc, pn, *pad_sp), dtype=g.dtype)
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    dxp[:, :, a:a + s * do:s, b:b + s * ho:s, c:c + s * wo:s] += gcols[:, a, b, c]
        dxp = dxp.transpose(1, 0, 2, 3, 4)
        p = self.padding
        dx = dxp[:, :, p:dxp.shape[2] - p, p:dxp.shape[3] - p, p:dxp.shape[4] - p] if p else dxp
        grads = (np.ascontiguousarray(dx), dw)
        if self.has_bias:
            grads = grads + (gmat.sum(axis=0),)
        return grads


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5:
        raise ShapeError(f"conv3d: input must be NCDHW, got {x.shape}")
    if weight.ndim != 5 or len(set(weight.shape[2:])) != 1:
        raise ShapeError(f"conv3d: weight must be (C_out, C_in, k, k, k), got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    k = weight.shape[-1]
    if stride not in (1, 2):
        raise ValueError(f"conv3d: stride must be 1 or 2, got {stride}")
    if k not in (1, 3):
        raise ValueError(f"conv3d: kernel side must be 1 or 3, got {k}")
    for n in x.shape[2:]:
        if _out_extent(n, k, stride, padding) <= 0:
            raise ShapeError(f"conv3d: input {x.shape} gives non-positive output extent")
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    if bias is not None and parents[2].shape != (weight.shape[0],):
        raise ShapeError(f"conv3d: bias must be ({weight.shape[0]},), got {parents[2].shape}")
    return Conv3d.apply(*parents, stride=stride, padding=padding)


class Upsample3d(Function):
    def forward(self, x, factor):
        self.factor = factor
        out = x
        for ax in (-3, -2, -1):
            out = np.repeat(out, factor, axis=ax)
        return out

    def backward(self, g):
        f = self.factor
        *lead, d, h, w = g.shape
        g = g.reshape(*lead, d // f, f, h // f, f, w // f, f)
        n = len(lead)
        return (g.sum(axis=(n + 1, n + 3, n + 5)),)


def upsample3d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last three axes by an integer factor."""
    x = as_tensor(x)
    if factor < 2:
        raise ValueError(f"upsample3d: factor must be >= 2, got {factor}")
    if x.ndim < 3:
        raise ShapeError(f"upsample3d: need at least 3 spatial axes, got {x.shape}")
    return Upsample3d.apply(x, factor=int(factor))


class AvgPool3d(Function):
    def forward(self, x, factor):
        self.factor, self.in_shape = factor, x.shape
        f = factor
        *lead, d, h, w = x.shape
        n = len(lead)
        return x.reshape(*lead, d // f, f, h // f, f, w // f, f).mean(axis=(n + 1, n + 3, n + 5))

    def backward(self, g):
        f = self.factor
        out = g / f**3
        for ax in (-3, -2, -1):
            out = np.repeat(out, f, axis=ax)
        return (out,)


def avg_pool3d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling of the last three axes."""
    x = as_tensor(x)
    if factor == 1:
        return x
    if any(n % factor for n in x.shape[-3:]):
        raise ShapeError(f"avg_pool3d: extents {x.shape[-3:]} not divisible by {factor}")
    return AvgPool3d.apply(x, factor=int(factor))
