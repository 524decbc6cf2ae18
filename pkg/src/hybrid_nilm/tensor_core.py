"""Numeric primitives shared by every layer.

Tensors are plain ``numpy.ndarray`` objects in float64.  This module adds the
few pieces numpy does not hand us directly: overflow-safe activations, a
matmul that reports both shapes on mismatch, and a central-difference
gradient oracle used by the test-suite to check every backward pass.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array shapes are incompatible for an operation."""


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def sigmoid(x):
    """Logistic function, stable for large negative inputs.

    Uses ``1 / (1 + exp(-x))`` for ``x >= 0`` and ``exp(x) / (1 + exp(x))``
    otherwise, so neither branch ever exponentiates a large positive number.
    Accepts scalars or arrays.
    """
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0, e) / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


def tanh_act(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.tanh(x)
    if out.ndim == 0:
        return float(out)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {list(a.shape)} x {list(b.shape)}")
    return a @ b


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], params: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``params`` is copied; ``f`` receives a perturbed copy with the same shape
    for each coordinate.  Costs ``2 * params.size`` evaluations of ``f``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.array(params, dtype=DTYPE, copy=True)
    grad = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(p))
        flat[i] = orig - eps
        f_minus = float(f(p))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom
