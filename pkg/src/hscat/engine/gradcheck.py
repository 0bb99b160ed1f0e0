"""Central finite-difference checks of tape gradients.

All arithmetic here is float64: callers are expected to build their tensors
and parameters in double precision before checking.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """||a - n|| / max(||a||, ||n||, floor) in float64."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def numerical_gradient(f: Callable[[], Tensor], leaf: Tensor, step: float = 1e-3,
                       indices: Sequence[int] | None = None) -> np.ndarray:
    """d f / d leaf by central differences, one element at a time.

    ``indices`` restricts the flat elements probed; the rest stay zero.
    """
    leaf.data = np.ascontiguousarray(leaf.data)
    flat = leaf.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f().data.sum(dtype=np.float64))
        flat[i] = orig - step
        fm = float(f().data.sum(dtype=np.float64))
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * step)
    return grad.reshape(leaf.shape)


def tape_gradients(f: Callable[[], Tensor], leaves: Sequence[Tensor]) -> list[np.ndarray]:
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = np.zeros_like(leaf.data)
    backward(f())
    return [leaf.grad.copy() for leaf in leaves]


def check_gradients(f: Callable[[], Tensor], leaves: Sequence[Tensor], step: float = 1e-3) -> list[float]:
    """Relative error between tape and finite-difference gradients, one per leaf.

    ``f`` must rebuild the graph on each call and return a scalar (or a
    tensor that is summed).
    """
    def scalar():
        from . import ops
        out = f()
        return out if out.size == 1 else ops.sum(out)

    analytic = tape_gradients(scalar, leaves)
    return [relative_error(a, numerical_gradient(scalar, leaf, step)) for a, leaf in zip(analytic, leaves)]


def directional_check(f: Callable[[], Tensor], leaf: Tensor, direction: np.ndarray,
                      analytic: np.ndarray, step: float = 1e-3) -> float:
    """Compare <grad, v> against (f(x + h v) - f(x - h v)) / 2h."""
    orig = leaf.data.copy()
    leaf.data = orig + step * direction
    fp = float(f().data.sum(dtype=np.float64))
    leaf.data = orig - step * direction
    fm = float(f().data.sum(dtype=np.float64))
    leaf.data = orig
    numeric = (fp - fm) / (2 * step)
    projected = float(np.sum(analytic.astype(np.float64) * direction))
    return relative_error(np.array([projected]), np.array([numeric]))
