"""Truncated-SVD reduction of optimizer trajectories and latent-space fits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .polylib import build_library
from .sindy import (
    FDScheme,
    StlsqConfig,
    SurrogateModel,
    TrajectoryHistory,
    fit_gradient_model,
    fit_state_dynamics,
)

__all__ = ["ReducedBasis", "truncated_svd", "project", "lift", "fit_latent_dynamics"]

# Above these sizes the Gram-matrix route is not used.
_GRAM_MAX_COLUMNS = 50
_GRAM_MAX_ROWS = 100_000


@dataclass(frozen=True)
class ReducedBasis:
    """Orthonormal ``(n, r)`` mode matrix with its singular values."""

    u: np.ndarray
    singular_values: np.ndarray

    @property
    def n(self) -> int:
        return self.u.shape[0]

    @property
    def r(self) -> int:
        return self.u.shape[1]


def _fix_signs(U, V):
    # largest-magnitude entry of every column of U is made positive
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, V * signs


def truncated_svd(A_t, r: int) -> tuple[ReducedBasis, np.ndarray]:
    """Best rank-``r`` factors of the ``(n, K)`` snapshot matrix ``A_t``.

    Returns the basis (``U``, ``Sigma``) and the ``(K, r)`` mode-coefficient
    matrix ``V`` so that ``A_t ~ U diag(Sigma) V^T``.

    For few snapshots the dominant right singular vectors are taken from the
    ``K x K`` Gram matrix, then refined by a thin SVD of ``A_t V`` so that
    ``U`` is orthonormal to working precision even when ``A_t`` is rank
    deficient. Cost is ``O(n K^2)``.
    """
    A_t = np.asarray(A_t, dtype=float)
    if A_t.ndim != 2:
        raise ValueError("snapshot matrix must be two-dimensional")
    n, K = A_t.shape
    if not 1 <= r <= min(n, K):
        raise ValueError(f"rank r={r} outside [1, {min(n, K)}]")

    if K < _GRAM_MAX_COLUMNS and n <= _GRAM_MAX_ROWS:
        gram = A_t.T @ A_t
        evals, evecs = np.linalg.eigh(gram)
        V0 = evecs[:, ::-1][:, :r]
        U, s, Wt = np.linalg.svd(A_t @ V0, full_matrices=False)
        V = V0 @ Wt.T
    else:
        U, s, Vt = np.linalg.svd(A_t, full_matrices=False)
        U, s, V = U[:, :r], s[:r], Vt[:r].T
    U, V = _fix_signs(U, V)
    return ReducedBasis(u=U, singular_values=s), V


def project(basis: ReducedBasis, a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape[-1] != basis.n:
        raise ValueError(f"state has length {a.shape[-1]}, basis expects {basis.n}")
    return a @ basis.u


def lift(basis: ReducedBasis, latent) -> np.ndarray:
    latent = np.asarray(latent, dtype=float)
    if latent.shape[-1] != basis.r:
        raise ValueError(f"latent vector has length {latent.shape[-1]}, basis rank is {basis.r}")
    return latent @ basis.u.T


def fit_latent_dynamics(
    history: TrajectoryHistory,
    r: int,
    P: int,
    scheme=FDScheme.CENTERED2,
    cfg: StlsqConfig = StlsqConfig(),
    include_edges: bool = True,
) -> SurrogateModel:
    """Fit a polynomial model of the rank-``r`` projected trajectory.

    With recorded gradients the latent target is ``G U`` (gradient model);
    otherwise the projected states are differentiated in time. The returned
    model carries the basis, so it predicts in the full space as
    ``U Xi^T phi(U^T a)``.
    """
    basis, _ = truncated_svd(history.states.T, r)
    latent_states = history.states @ basis.u
    latent_grads = None if history.gradients is None else history.gradients @ basis.u
    latent = TrajectoryHistory(latent_states, history.eta, history.t0, latent_grads)
    lib = build_library(r, P)
    if latent_grads is not None:
        model = fit_gradient_model(latent, lib, cfg)
    else:
        model = fit_state_dynamics(latent, lib, scheme, cfg, include_edges)
    return SurrogateModel(model.library, model.xi, model.target_kind, basis, model.warnings)
