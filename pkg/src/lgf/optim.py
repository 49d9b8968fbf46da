"""Base optimizers (gradient descent, damped Newton, ADAM) and the objective interface."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "Objective",
    "SingularHessianError",
    "AdamParams",
    "AdamIterate",
    "gd_step",
    "newton_step",
    "adam_update",
    "adam_step",
]


class SingularHessianError(np.linalg.LinAlgError):
    pass


class Objective:
    """Evaluation surface of an objective ``z: R^n -> R``.

    Subclasses implement :meth:`value` and :meth:`gradient`, and optionally
    :meth:`hessian_solve`. Stochastic objectives take a ``noise_key`` that
    selects the noise draw, so repeated calls with the same key replay.
    """

    dim: int
    stochastic: bool = False
    thread_safe: bool = True
    has_hessian: bool = False

    def value(self, a: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, a: np.ndarray, noise_key: Optional[int] = None) -> np.ndarray:
        raise NotImplementedError

    def hessian_solve(self, a: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} provides no Hessian")

    def initial_state(self, seed: int = 0) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class AdamParams:
    eta: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.eta <= 0:
            raise ValueError("eta must be positive")


@dataclass(frozen=True)
class AdamIterate:
    """Discrete ADAM state after ``k`` updates."""

    a: np.ndarray
    m: np.ndarray
    v: np.ndarray
    k: int = 0

    @classmethod
    def start(cls, a) -> "AdamIterate":
        a = np.asarray(a, dtype=float)
        return cls(a, np.zeros_like(a), np.zeros_like(a), 0)


def _checked(g):
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("objective returned a non-finite gradient")
    return g


def gd_step(obj: Objective, a, eta: float, noise_key: Optional[int] = None) -> np.ndarray:
    if eta <= 0:
        raise ValueError("eta must be positive")
    a = np.asarray(a, dtype=float)
    return a - eta * _checked(obj.gradient(a, noise_key))


def newton_step(obj: Objective, a, eta: float, noise_key: Optional[int] = None) -> np.ndarray:
    """Damped Newton update ``a - eta H(a)^{-1} grad z(a)``; no regularization."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    a = np.asarray(a, dtype=float)
    g = _checked(obj.gradient(a, noise_key))
    try:
        step = obj.hessian_solve(a, g)
    except np.linalg.LinAlgError as exc:
        raise SingularHessianError(f"Hessian solve failed: {exc}") from exc
    step = np.asarray(step, dtype=float)
    if not np.all(np.isfinite(step)):
        raise SingularHessianError("Hessian solve returned non-finite values")
    return a - eta * step


def adam_update(s: AdamIterate, g, params: AdamParams) -> AdamIterate:
    """Discrete ADAM update given the gradient ``g`` at ``s.a``."""
    g = _checked(g)
    m = params.beta1 * s.m + (1 - params.beta1) * g
    v = params.beta2 * s.v + (1 - params.beta2) * g * g
    m_hat = m / (1 - params.beta1 ** (s.k + 1))
    v_hat = v / (1 - params.beta2 ** (s.k + 1))
    a = s.a - params.eta * (m_hat / (np.sqrt(v_hat) + params.epsilon))
    return AdamIterate(a, m, v, s.k + 1)


def adam_step(obj: Objective, s: AdamIterate, params: AdamParams, noise_key: Optional[int] = None):
    return adam_update(s, obj.gradient(s.a, noise_key), params)
