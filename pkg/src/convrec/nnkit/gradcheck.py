"""Central-difference gradient checking for scalar-valued functions."""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = ["numeric_gradient", "max_relative_error", "check_gradient"]

_DEFAULT_H = 1e-5
_DEFAULT_TOL = 1e-4


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = _DEFAULT_H) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. ``x``, perturbing in place.

    ``f`` takes no arguments and must read the current contents of ``x``.
    """
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = f()
        flat_x[i] = orig - h
        f_minus = f()
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(numeric: np.ndarray, analytic: np.ndarray) -> float:
    """Worst elementwise ``|num - ana| / max(|num|, |ana|, 1e-6)``."""
    num = np.asarray(numeric, dtype=float).ravel()
    ana = np.asarray(analytic, dtype=float).ravel()
    denom = np.maximum(np.maximum(np.abs(num), np.abs(ana)), 1e-6)
    return float(np.max(np.abs(num - ana) / denom)) if num.size else 0.0


def check_gradient(f: Callable[[], float], x: np.ndarray, analytic: np.ndarray,
                   h: float = _DEFAULT_H, tol: float = _DEFAULT_TOL) -> float:
    """Return the max relative error between numeric and analytic gradients.

    Raises ``AssertionError`` when the error exceeds ``tol``.
    """
    err = max_relative_error(numeric_gradient(f, x, h), analytic)
    if err >= tol:
        raise AssertionError(f"gradient check failed: max relative error {err:.3e} >= {tol:.0e}")
    return err
