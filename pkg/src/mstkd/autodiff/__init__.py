"""Minimal dense tensors with reverse-mode differentiation."""

from .conv import avg_pool3d, conv3d, upsample3d
from .io import load_checkpoint, load_tensor, save_checkpoint, save_tensor
from .ops import (
    AxisReduceMode,
    add,
    broadcast_to,
    concat,
    div,
    exp,
    global_max_pool,
    layer_norm,
    leaky_relu,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    normalize,
    reduce,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    square,
    stack,
    sub,
    sum,
    take,
    transpose,
)
from .tensor import Function, NumericError, ShapeError, Tensor, as_tensor
from .gradcheck import gradcheck, numerical_grad, relative_error
