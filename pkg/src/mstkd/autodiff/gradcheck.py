"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, List, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(
    f: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5
) -> List[np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. every entry of every input."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig - h
            fm = f(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_grad(f: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> List[np.ndarray]:
    tensors = [Tensor(a, requires_grad=True) for a in inputs]
    f(*tensors).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)`` over the flattened arrays."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    rtol: float = 1e-4,
) -> float:
    """Return the worst relative error across inputs; raise AssertionError above ``rtol``."""
    ana = analytic_grad(f, inputs)
    num = numerical_grad(f, inputs, h)
    worst = max(relative_error(a, n) for a, n in zip(ana, num))
    if worst >= rtol:
        raise AssertionError(f"gradient mismatch: relative error {worst:.3e} >= {rtol:.0e}")
    return worst
