"""Derivative estimation and sequentially thresholded least squares (STLSQ).

The fitted :class:`SurrogateModel` defines a right-hand side
``f(a) = Xi^T phi(a)`` over a polynomial candidate library, optionally
composed with a linear reduction basis ``a -> U Xi^T phi(U^T a)``.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from .polylib import CandidateLibrary, build_library_matrix, eval_library

if TYPE_CHECKING:
    from .reduction import ReducedBasis

__all__ = [
    "FDScheme",
    "TargetKind",
    "TrajectoryHistory",
    "StlsqConfig",
    "SurrogateModel",
    "EmptyActiveSetWarning",
    "NonFinitePredictionError",
    "estimate_derivatives",
    "stlsq_fit",
    "fit_state_dynamics",
    "fit_gradient_model",
    "predict_rhs",
]


class FDScheme(str, enum.Enum):
    FORWARD = "forward"
    CENTERED2 = "centered2"
    CENTERED4 = "centered4"

    @property
    def edge_rows(self) -> tuple[int, int]:
        """Rows at (start, end) that fall back to one-sided stencils."""
        return {"forward": (0, 1), "centered2": (1, 1), "centered4": (2, 2)}[self.value]

    @property
    def min_samples(self) -> int:
        return {"forward": 2, "centered2": 3, "centered4": 5}[self.value]


class TargetKind(str, enum.Enum):
    STATE_DERIVATIVE = "state_derivative"
    GRADIENT = "gradient"


class EmptyActiveSetWarning(UserWarning):
    """Every library term was thresholded away; the fit is identically zero."""


class NonFinitePredictionError(FloatingPointError):
    def __init__(self, state: np.ndarray, value: np.ndarray):
        super().__init__(f"surrogate produced a non-finite value at state {state!r}")
        self.state = state
        self.value = value


@dataclass(frozen=True)
class TrajectoryHistory:
    """A window of ``K`` optimizer iterates sampled every ``eta`` in pseudo-time.

    ``times`` defaults to ``t0 + k * eta``. ``gradients``, when given, holds the
    objective gradient recorded at each row of ``states``.
    """

    states: np.ndarray
    eta: float
    t0: float = 0.0
    gradients: Optional[np.ndarray] = None

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        object.__setattr__(self, "states", states)
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if states.shape[0] < 1:
            raise ValueError("history has no samples")
        if self.gradients is not None:
            grads = np.atleast_2d(np.asarray(self.gradients, dtype=float))
            if grads.shape != states.shape:
                raise ValueError(
                    f"gradients shape {grads.shape} differs from states shape {states.shape}"
                )
            object.__setattr__(self, "gradients", grads)

    @property
    def K(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.eta * np.arange(self.K)


@dataclass(frozen=True)
class StlsqConfig:
    alpha: float = 1e-6
    threshold: float = 1e-8
    max_iter: int = 20
    unbias: bool = True
    normalize_columns: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.threshold < 0:
            raise ValueError(f"threshold must be >= 0, got {self.threshold}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True)
class SurrogateModel:
    library: CandidateLibrary
    xi: np.ndarray
    target_kind: TargetKind = TargetKind.STATE_DERIVATIVE
    basis: Optional["ReducedBasis"] = None
    warnings: tuple = field(default=())

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.ndim != 2 or xi.shape[0] != self.library.size:
            raise ValueError(
                f"xi has shape {xi.shape}, expected ({self.library.size}, m)"
            )
        if not np.all(np.isfinite(xi)):
            raise ValueError("non-finite coefficients in surrogate model")
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)

    @property
    def input_dim(self) -> int:
        return self.basis.n if self.basis is not None else self.library.n

    def __call__(self, a) -> np.ndarray:
        return predict_rhs(self, a)

    def predict_many(self, A) -> np.ndarray:
        """Vectorized prediction over the rows of ``A``."""
        A = np.asarray(A, dtype=float)
        if self.basis is not None:
            latent = A @ self.basis.u
            return build_library_matrix(self.library, latent) @ self.xi @ self.basis.u.T
        return build_library_matrix(self.library, A) @ self.xi


def estimate_derivatives(history: TrajectoryHistory, scheme=FDScheme.CENTERED2) -> np.ndarray:
    """Finite-difference time derivatives of ``history.states``.

    Interior rows use the requested stencil; the edge rows use one-sided
    stencils of the same order (the forward scheme falls back to a backward
    difference on the last row).
    """
    scheme = FDScheme(scheme)
    X = history.states
    K, h = X.shape[0], history.eta
    if K < scheme.min_samples:
        raise ValueError(
            f"{scheme.value} differences need at least {scheme.min_samples} samples, got {K}"
        )
    D = np.empty_like(X)
    if scheme is FDScheme.FORWARD:
        D[:-1] = (X[1:] - X[:-1]) / h
        D[-1] = (X[-1] - X[-2]) / h
    elif scheme is FDScheme.CENTERED2:
        D[1:-1] = (X[2:] - X[:-2]) / (2 * h)
        D[0] = (-3 * X[0] + 4 * X[1] - X[2]) / (2 * h)
        D[-1] = (3 * X[-1] - 4 * X[-2] + X[-3]) / (2 * h)
    else:
        D[2:-2] = (X[:-4] - 8 * X[1:-3] + 8 * X[3:-1] - X[4:]) / (12 * h)
        D[0] = (-25 * X[0] + 48 * X[1] - 36 * X[2] + 16 * X[3] - 3 * X[4]) / (12 * h)
        D[1] = (-3 * X[0] - 10 * X[1] + 18 * X[2] - 6 * X[3] + X[4]) / (12 * h)
        D[-2] = (3 * X[-1] + 10 * X[-2] - 18 * X[-3] + 6 * X[-4] - X[-5]) / (12 * h)
        D[-1] = (25 * X[-1] - 48 * X[-2] + 36 * X[-3] - 16 * X[-4] + 3 * X[-5]) / (12 * h)
    return D


def _ridge(phi: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    # least squares on the augmented system [phi; sqrt(alpha) I] avoids forming phi^T phi
    if alpha > 0:
        p = phi.shape[1]
        phi = np.vstack([phi, np.sqrt(alpha) * np.eye(p)])
        y = np.concatenate([y, np.zeros(p)])
    coef, *_ = np.linalg.lstsq(phi, y, rcond=None)
    return coef


def _stlsq_column(phi, y, usable, cfg, trace):
    active = usable.copy()
    coef = np.zeros(phi.shape[1])
    if trace is not None:
        trace.append(active.copy())
    for _ in range(cfg.max_iter):
        if not active.any():
            break
        coef = np.zeros(phi.shape[1])
        coef[active] = _ridge(phi[:, active], y, cfg.alpha)
        keep = active & (np.abs(coef) >= cfg.threshold)
        coef[~keep] = 0.0
        if trace is not None:
            trace.append(keep.copy())
        if np.array_equal(keep, active):
            break
        active = keep
    if cfg.unbias and active.any():
        coef = np.zeros(phi.shape[1])
        coef[active] = _ridge(phi[:, active], y, 0.0)
    return coef, active


def stlsq_fit(phi, target, cfg: StlsqConfig = StlsqConfig(), trace: list | None = None) -> np.ndarray:
    """Sequentially thresholded ridge regression of ``target`` onto ``phi``.

    Parameters
    ----------
    phi : (K, p) array
        Library matrix.
    target : (K, m) array
        Regression targets, one independent fit per column.
    cfg : StlsqConfig
        Solver settings. The threshold is applied to coefficients of the
        unit-norm columns when ``cfg.normalize_columns`` is set.
    trace : list, optional
        If given, receives one list of boolean active-set masks per target
        column (initial mask first, then one per thresholding pass).

    Returns
    -------
    (p, m) array
        Coefficients in the original (unnormalized) column scaling. An empty
        active set yields zeros and an :class:`EmptyActiveSetWarning`.
    """
    phi = np.asarray(phi, dtype=float)
    target = np.asarray(target, dtype=float)
    squeeze = target.ndim == 1
    if squeeze:
        target = target[:, None]
    if phi.ndim != 2 or target.ndim != 2 or phi.shape[0] != target.shape[0]:
        raise ValueError(f"incompatible shapes phi {phi.shape} and target {target.shape}")
    if phi.shape[0] < 1:
        raise ValueError("need at least one sample")
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(target))):
        raise ValueError("non-finite entries in regression inputs")

    norms = np.linalg.norm(phi, axis=0)
    usable = norms > 0
    if cfg.normalize_columns:
        scale = np.where(usable, norms, 1.0)
        phin = phi / scale
    else:
        scale = np.ones(phi.shape[1])
        phin = phi

    xi = np.zeros((phi.shape[1], target.shape[1]))
    empty = []
    for j in range(target.shape[1]):
        col_trace = [] if trace is not None else None
        coef, active = _stlsq_column(phin, target[:, j], usable, cfg, col_trace)
        if trace is not None:
            trace.append(col_trace)
        if not active.any():
            empty.append(j)
        xi[:, j] = coef / scale

    if not np.all(np.isfinite(xi)):
        raise FloatingPointError("STLSQ solve produced non-finite coefficients")
    if empty:
        warnings.warn(
            f"all library terms thresholded away for target column(s) {empty}",
            EmptyActiveSetWarning,
            stacklevel=2,
        )
    return xi[:, 0] if squeeze else xi


def _fit(phi, target, cfg):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyActiveSetWarning)
        xi = stlsq_fit(phi, target, cfg)
    notes = tuple(str(w.message) for w in caught if issubclass(w.category, EmptyActiveSetWarning))
    for w in caught:
        warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    return xi, notes


def fit_state_dynamics(
    history: TrajectoryHistory,
    lib: CandidateLibrary,
    scheme=FDScheme.CENTERED2,
    cfg: StlsqConfig = StlsqConfig(),
    include_edges: bool = True,
) -> SurrogateModel:
    """Fit ``da/dt ~ Xi^T phi(a)`` to finite-difference derivatives of the history.

    With ``include_edges=False`` only rows carrying the symmetric (or forward)
    stencil enter the regression. The one-sided edge rows have a different
    truncation error; for iterates of a discrete affine map they are
    inconsistent with the interior rows, and that mismatch gets amplified once
    the samples cluster near a minimizer.
    """
    scheme = FDScheme(scheme)
    if history.n != lib.n:
        raise ValueError(f"history has {history.n} variables, library has {lib.n}")
    phi = build_library_matrix(lib, history.states)
    deriv = estimate_derivatives(history, scheme)
    if not include_edges:
        lo, hi = scheme.edge_rows
        rows = slice(lo, history.K - hi)
        phi, deriv = phi[rows], deriv[rows]
    xi, notes = _fit(phi, deriv, cfg)
    return SurrogateModel(lib, xi, TargetKind.STATE_DERIVATIVE, warnings=notes)


def fit_gradient_model(
    history: TrajectoryHistory,
    lib: CandidateLibrary,
    cfg: StlsqConfig = StlsqConfig(),
) -> SurrogateModel:
    """Fit ``grad z(a) ~ Xi^T phi(a)`` to recorded gradients (no differentiation)."""
    if history.gradients is None:
        raise ValueError("history carries no gradient observations")
    if history.n != lib.n:
        raise ValueError(f"history has {history.n} variables, library has {lib.n}")
    phi = build_library_matrix(lib, history.states)
    xi, notes = _fit(phi, history.gradients, cfg)
    return SurrogateModel(lib, xi, TargetKind.GRADIENT, warnings=notes)


def predict_rhs(model: SurrogateModel, a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (model.input_dim,):
        raise ValueError(f"state has shape {a.shape}, model expects ({model.input_dim},)")
    with np.errstate(over="ignore", invalid="ignore"):
        # overflow surfaces as NonFinitePredictionError below
        if model.basis is not None:
            latent = model.basis.u.T @ a
            out = model.basis.u @ (model.xi.T @ eval_library(model.library, latent))
        else:
            out = model.xi.T @ eval_library(model.library, a)
    if not np.all(np.isfinite(out)):
        raise NonFinitePredictionError(a.copy(), out)
    return out
