"""Adam optimizer and cosine-annealed learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["Adam", "NonFiniteGradientError", "cosine_lr"]


class NonFiniteGradientError(RuntimeError):
    """A gradient contained NaN or infinity; training must stop."""


class Adam:
    """Standard Adam with bias correction; parameters are updated in place.

    Parameters are tracked by name so that moment state survives even when
    the set of tensors passed to :meth:`step` varies between calls.
    """

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float | None = None) -> None:
        """Apply one update to every parameter that has a gradient.

        Raises :class:`NonFiniteGradientError` (naming the offending
        parameter) before touching any state if a gradient is not finite.
        """
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        rate = self.lr if lr is None else float(lr)
        for name, g in grads.items():
            p = params[name]
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
                self._t[name] = 0
            self._t[name] += 1
            t = self._t[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p -= rate * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Half-cosine decay from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``.

    With ``total_steps == 0`` (nothing to anneal over) the rate is ``lr_max``.
    """
    if total_steps <= 0:
        return lr_max
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))
