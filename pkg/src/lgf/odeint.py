"""Explicit time integration for learned and true optimization flows.

Provides an adaptive Dormand-Prince 5(4) integrator with dense output, a
fixed-step classical RK4 fallback, and the augmented ODE system whose
semi-implicit discretization is the discrete ADAM update.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .optim import AdamParams

__all__ = [
    "Method",
    "IntegratorConfig",
    "IntegrationResult",
    "IntegrationError",
    "MaxStepsExceeded",
    "NonFiniteStateError",
    "AdamOdeState",
    "AdamTrajectory",
    "integrate",
    "adam_direction",
    "integrate_adam_system",
    "semi_implicit_adam_step",
]


class Method(str, enum.Enum):
    DOPRI5 = "dopri5"
    RK4_FIXED = "rk4"


@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-7
    atol: float = 1e-9
    max_steps: int = 1_000_000
    initial_step: Optional[float] = None
    method: Method = Method.DOPRI5

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        object.__setattr__(self, "method", Method(self.method))


class IntegrationError(RuntimeError):
    """Integration stopped early; ``t`` and ``y`` hold the last good state."""

    def __init__(self, msg: str, t: float, y: np.ndarray):
        super().__init__(msg)
        self.t = t
        self.y = y


class MaxStepsExceeded(IntegrationError):
    pass


class NonFiniteStateError(IntegrationError):
    pass


@dataclass
class IntegrationResult:
    t: float
    y: np.ndarray
    report_times: np.ndarray
    report_states: np.ndarray
    n_steps: int = 0
    n_rejected: int = 0
    n_evals: int = 0


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)
# Shampine's continuous extension: y(t + x h) = y + h * K^T P [x, x^2, x^3, x^4]
_P = np.array(
    [
        [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0


def _rms(x):
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


class _Rhs:
    """Wraps the user RHS: counts calls and turns bad values into errors."""

    def __init__(self, f, n):
        self.f = f
        self.n = n
        self.calls = 0

    def __call__(self, t, y):
        self.calls += 1
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                out = np.asarray(self.f(t, y), dtype=float)
        except FloatingPointError as exc:
            raise NonFiniteStateError(f"right-hand side failed at t={t}: {exc}", t, y) from exc
        if out.shape != (self.n,):
            raise ValueError(f"right-hand side returned shape {out.shape}, expected ({self.n},)")
        if not np.all(np.isfinite(out)):
            raise NonFiniteStateError(f"non-finite right-hand side at t={t}", t, y)
        return out


def _initial_step(rhs, t0, y0, f0, span, rtol, atol):
    scale = atol + rtol * np.abs(y0)
    d0, d1 = _rms(y0 / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = rhs(t0 + h0, y0 + h0 * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def _dopri5(rhs, t0, y0, t1, cfg, report):
    out = np.empty((len(report), y0.size))
    ri = 0
    while ri < len(report) and report[ri] <= t0:
        out[ri] = y0
        ri += 1
    t, y = t0, y0.copy()
    span = t1 - t0
    if span == 0:
        out[ri:] = y
        return t, y, out, 0, 0
    f = rhs(t, y)
    h = cfg.initial_step or _initial_step(rhs, t, y, f, span, cfg.rtol, cfg.atol)
    k = np.empty((7, y.size))
    steps = rejected = 0
    while t < t1:
        if steps >= cfg.max_steps:
            raise MaxStepsExceeded(f"max_steps={cfg.max_steps} exceeded at t={t}", t, y)
        h = min(h, t1 - t)
        last = t + h >= t1
        k[0] = f
        for s in range(1, 7):
            k[s] = rhs(t + _C[s] * h, y + h * (np.asarray(_A[s]) @ k[:s]))
        y_new = y + h * (_B @ k)
        if not np.all(np.isfinite(y_new)):
            raise NonFiniteStateError(f"non-finite state after step from t={t}", t, y)
        err_vec = h * (_E @ k)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = _rms(err_vec / scale)
        steps += 1
        if err <= 1.0:
            t_new = t1 if last else t + h
            if ri < len(report):
                Q = k.T @ _P
                while ri < len(report) and report[ri] <= t_new:
                    x = (report[ri] - t) / h
                    out[ri] = y + h * (Q @ np.array([x, x * x, x**3, x**4]))
                    ri += 1
            t, y, f = t_new, y_new, k[6].copy()
            factor = _MAX_FACTOR if err == 0 else min(_MAX_FACTOR, max(_MIN_FACTOR, _SAFETY * err ** -0.2))
            h *= factor
        else:
            rejected += 1
            h *= max(_MIN_FACTOR, _SAFETY * err ** -0.2)
            if t + h == t:
                raise IntegrationError(f"step size underflow at t={t}", t, y)
    out[ri:] = y
    return t, y, out, steps, rejected


def _rk4(rhs, t0, y0, t1, h, cfg, report):
    out = np.empty((len(report), y0.size))
    ri = 0
    t, y = t0, y0.copy()
    steps = 0
    # the grid is t0 + i*h; report times off the grid are hit by shortened steps
    targets = sorted(set([float(r) for r in report if t0 < r < t1] + [t1]))
    while ri < len(report) and report[ri] <= t0:
        out[ri] = y
        ri += 1
    i = 0
    for target in targets:
        while t < target:
            if steps >= cfg.max_steps:
                raise MaxStepsExceeded(f"max_steps={cfg.max_steps} exceeded at t={t}", t, y)
            t_next = min(t0 + (i + 1) * h, target)
            dt = t_next - t
            k1 = rhs(t, y)
            k2 = rhs(t + dt / 2, y + dt / 2 * k1)
            k3 = rhs(t + dt / 2, y + dt / 2 * k2)
            k4 = rhs(t + dt, y + dt * k3)
            y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(y)):
                raise NonFiniteStateError(f"non-finite state after step from t={t}", t, y)
            if t_next == t0 + (i + 1) * h:
                i += 1
            t = t_next
            steps += 1
        while ri < len(report) and report[ri] <= t:
            out[ri] = y
            ri += 1
    out[ri:] = y
    return t, y, out, steps, 0


def integrate(
    f: Callable[[float, np.ndarray], np.ndarray],
    a0,
    t0: float,
    t1: float,
    cfg: IntegratorConfig = IntegratorConfig(),
    report_times: Optional[Sequence[float]] = None,
    fixed_step: Optional[float] = None,
) -> IntegrationResult:
    """Integrate ``dy/dt = f(t, y)`` from ``t0`` to ``t1``.

    ``report_times`` (ascending, inside ``[t0, t1]``) are filled from the
    Dormand-Prince dense output, so they do not constrain the step sequence.
    The RK4 method steps with ``fixed_step`` (or ``cfg.initial_step``).
    """
    y0 = np.asarray(a0, dtype=float).copy()
    if y0.ndim != 1:
        raise ValueError("initial state must be one-dimensional")
    if t1 < t0:
        raise ValueError(f"t1={t1} precedes t0={t0}")
    if not np.all(np.isfinite(y0)):
        raise NonFiniteStateError("non-finite initial state", t0, y0)
    report = np.asarray([] if report_times is None else report_times, dtype=float)
    if report.size and (np.any(np.diff(report) < 0) or report[0] < t0 or report[-1] > t1):
        raise ValueError("report_times must be ascending and inside [t0, t1]")
    rhs = _Rhs(f, y0.size)
    if cfg.method is Method.DOPRI5:
        # overflow shows up as a non-finite stage or state and raises below
        with np.errstate(over="ignore", invalid="ignore"):
            t, y, out, steps, rej = _dopri5(rhs, t0, y0, t1, cfg, report)
    else:
        h = fixed_step or cfg.initial_step
        if not h or h <= 0:
            raise ValueError("fixed-step RK4 needs a positive step")
        with np.errstate(over="ignore", invalid="ignore"):
            t, y, out, steps, rej = _rk4(rhs, t0, y0, t1, h, cfg, report)
    return IntegrationResult(t, y, report, out, steps, rej, rhs.calls)


@dataclass(frozen=True)
class AdamOdeState:
    """State of the augmented ADAM flow at pseudo-time ``t``."""

    a: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: float

    def __post_init__(self):
        a, m, v = (np.asarray(x, dtype=float) for x in (self.a, self.m, self.v))
        if not (a.shape == m.shape == v.shape):
            raise ValueError("a, m and v must share one shape")
        if np.any(v < -1e-12):
            raise ValueError("second moment must be non-negative")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "v", np.maximum(v, 0.0))


@dataclass
class AdamTrajectory:
    final: AdamOdeState
    times: np.ndarray
    a: np.ndarray
    m: np.ndarray
    v: np.ndarray
    n_steps: int = 0


def adam_direction(m, v, exponent, params: AdamParams):
    """Bias-corrected ADAM velocity ``-m_hat / (sqrt(v_hat) + eps)``.

    ``exponent`` is ``t / eta``; at integer values this is the iteration
    count used by the discrete bias corrections.
    """
    m_hat = m / (1 - params.beta1**exponent)
    v_hat = np.maximum(v, 0.0) / (1 - params.beta2**exponent)
    return -m_hat / (np.sqrt(v_hat) + params.epsilon)


def integrate_adam_system(
    f_hat: Callable[[np.ndarray], np.ndarray],
    s0: AdamOdeState,
    t1: float,
    params: AdamParams,
    cfg: IntegratorConfig = IntegratorConfig(),
    report_times: Optional[Sequence[float]] = None,
) -> AdamTrajectory:
    """Integrate the coupled ``(a, m, v)`` ADAM flow with ``f_hat`` as the gradient."""
    if s0.t <= 0:
        raise ValueError(f"ADAM flow must start at t > 0 (bias terms vanish at 0), got t={s0.t}")
    n = s0.a.size
    eta = params.eta
    c1 = (1 - params.beta1) / eta
    c2 = (1 - params.beta2) / eta

    def rhs(t, y):
        a, m, v = y[:n], y[n : 2 * n], y[2 * n :]
        g = np.asarray(f_hat(a), dtype=float)
        return np.concatenate([adam_direction(m, v, t / eta, params), c1 * (g - m), c2 * (g * g - v)])

    y0 = np.concatenate([s0.a, s0.m, s0.v])
    res = integrate(rhs, y0, s0.t, t1, cfg, report_times, fixed_step=eta)
    R = res.report_states
    final = AdamOdeState(res.y[:n], res.y[n : 2 * n], np.maximum(res.y[2 * n :], 0.0), res.t)
    return AdamTrajectory(
        final, res.report_times, R[:, :n], R[:, n : 2 * n], np.maximum(R[:, 2 * n :], 0.0), res.n_steps
    )


def semi_implicit_adam_step(s: AdamOdeState, g, k: int, params: AdamParams) -> AdamOdeState:
    """One step of size ``eta`` of the ADAM flow with the gradient frozen at ``g``.

    Forward Euler on ``m`` and ``v`` (written in the expanded form
    ``m + (1 - beta1) (g - m) = beta1 m + (1 - beta1) g``), then backward Euler
    on ``a`` using the new moments at ``t = (k + 1) eta``.
    """
    if k < 0:
        raise ValueError("iteration index must be >= 0")
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient")
    m = params.beta1 * s.m + (1 - params.beta1) * g
    v = params.beta2 * s.v + (1 - params.beta2) * g * g
    a = s.a + params.eta * adam_direction(m, v, float(k + 1), params)
    return AdamOdeState(a, m, v, (k + 1) * params.eta)
