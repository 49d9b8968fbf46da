"""Learned-gradient-flow driver with scheduled retraining.

Each cycle takes ``K`` steps of the true optimizer while recording the
iterates, fits a surrogate right-hand side to that window, and integrates the
surrogate flow for the remaining ``M - K`` epochs of the cycle. The output
of one cycle seeds the next.
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .odeint import (
    AdamOdeState,
    IntegrationError,
    IntegratorConfig,
    integrate,
    integrate_adam_system,
)
from .optim import AdamIterate, AdamParams, Objective, adam_update, gd_step, newton_step
from .polylib import build_library
from .reduction import fit_latent_dynamics
from .sindy import (
    FDScheme,
    NonFinitePredictionError,
    StlsqConfig,
    SurrogateModel,
    TrajectoryHistory,
    fit_gradient_model,
    fit_state_dynamics,
)

__all__ = [
    "Mode",
    "Phase",
    "OnNonfinite",
    "LgfConfig",
    "CycleReport",
    "RunReport",
    "LgfRunError",
    "acceleration",
    "run_cycle",
    "run_lgf",
    "run_baseline",
]

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    GRADIENT_DESCENT = "gd"
    NEWTON = "newton"
    ADAM = "adam"


class Phase(str, enum.Enum):
    TRUE = "true"
    SURROGATE = "surrogate"


class OnNonfinite(str, enum.Enum):
    ERROR = "error"
    FALLBACK_TO_TRUE = "fallback"


def acceleration(K: int, M: int) -> float:
    """Percentage of extra epochs gained per true step: ``100 (M/K - 1)``."""
    if not M >= K >= 1:
        raise ValueError(f"need M >= K >= 1, got K={K}, M={M}")
    return 100.0 * (M / K - 1.0)


@dataclass(frozen=True)
class LgfConfig:
    mode: Mode
    eta: float
    history_size: int
    retrain_interval: int
    epochs: int
    poly_order: int = 1
    truncation_rank: Optional[int] = None
    fd_scheme: FDScheme = FDScheme.CENTERED2
    fit_edge_rows: bool = False
    stlsq: StlsqConfig = StlsqConfig()
    integrator: IntegratorConfig = IntegratorConfig()
    adam: Optional[AdamParams] = None
    on_nonfinite: OnNonfinite = OnNonfinite.ERROR
    record_every: int = 1
    log_surrogate_loss: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "fd_scheme", FDScheme(self.fd_scheme))
        object.__setattr__(self, "on_nonfinite", OnNonfinite(self.on_nonfinite))
        K, M = self.history_size, self.retrain_interval
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if K < self.fd_scheme.min_samples:
            raise ValueError(
                f"history_size K={K} is below the {self.fd_scheme.value} minimum of {self.fd_scheme.min_samples}"
            )
        if M < K:
            raise ValueError(f"M >= K required (retrain_interval={M}, history_size={K})")
        if self.epochs < K:
            raise ValueError(f"epochs={self.epochs} must be at least history_size={K}")
        if self.poly_order < 0:
            raise ValueError("poly_order must be >= 0")
        if self.truncation_rank is not None and not 1 <= self.truncation_rank <= K:
            raise ValueError(f"truncation_rank must lie in [1, K={K}]")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    @property
    def adam_params(self) -> AdamParams:
        return replace(self.adam, eta=self.eta) if self.adam else AdamParams(self.eta)

    @property
    def acceleration_percent(self) -> float:
        return acceleration(self.history_size, self.retrain_interval)


@dataclass
class CycleReport:
    start_epoch: int
    epochs: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    states: list = field(default_factory=list)
    gradient_evals: int = 0
    hessian_solves: int = 0
    fallback_steps: int = 0
    model: Optional[SurrogateModel] = None
    entry_carry: Optional[AdamIterate] = None
    exit_carry: Optional[AdamIterate] = None
    warnings: list = field(default_factory=list)

    def _log(self, epoch, phase, state):
        self.epochs.append(epoch)
        self.phases.append(phase)
        self.states.append(np.array(state, dtype=float))


@dataclass
class RunReport:
    """Per-epoch log of an optimization run.

    ``epochs``/``times``/``trajectory``/``loss_history``/``grad_evals_history``
    cover the logged epochs (epoch 0 plus every ``record_every``-th epoch and
    the last). ``phase_history`` has one entry per epoch ``1..epochs``.
    """

    epochs: np.ndarray
    times: np.ndarray
    trajectory: np.ndarray
    loss_history: np.ndarray
    grad_evals_history: np.ndarray
    phase_history: list
    true_gradient_evals: int
    true_hessian_solves: int
    acceleration_percent: float
    terminal_state: np.ndarray
    warnings: list = field(default_factory=list)
    n_cycles: int = 0
    fallback_steps: int = 0
    cycles: list = field(default_factory=list)

    @property
    def logged_phases(self) -> list:
        return [Phase.TRUE if e == 0 else self.phase_history[e - 1] for e in self.epochs]


class LgfRunError(RuntimeError):
    """A run failed; ``report`` holds everything logged up to the failure."""

    def __init__(self, msg, report: Optional[RunReport] = None):
        super().__init__(msg)
        self.report = report


def _true_step(obj, cfg, state, epoch, cycle, history=None):
    """Advance the true optimizer by one epoch; ``epoch`` keys the gradient noise."""
    if cfg.mode is Mode.ADAM:
        g = obj.gradient(state.a, epoch)
        if history is not None:
            history.append((state.a.copy(), np.array(g, dtype=float)))
        new = adam_update(state, g, cfg.adam_params)
    elif cfg.mode is Mode.NEWTON:
        new = newton_step(obj, state, cfg.eta, epoch)
        cycle.hessian_solves += 1
    else:
        new = gd_step(obj, state, cfg.eta, epoch)
    cycle.gradient_evals += 1
    return new


def _position(cfg, state):
    return state.a if cfg.mode is Mode.ADAM else state


def _fit_surrogate(cfg, history, eta, t0):
    if cfg.mode is Mode.ADAM:
        A = np.array([h[0] for h in history])
        G = np.array([h[1] for h in history])
    else:
        A, G = np.array(history), None
    hist = TrajectoryHistory(A, eta, t0, G)
    if cfg.truncation_rank is not None:
        return fit_latent_dynamics(
            hist, cfg.truncation_rank, cfg.poly_order, cfg.fd_scheme, cfg.stlsq, cfg.fit_edge_rows
        )
    lib = build_library(hist.n, cfg.poly_order)
    if G is not None:
        return fit_gradient_model(hist, lib, cfg.stlsq)
    return fit_state_dynamics(hist, lib, cfg.fd_scheme, cfg.stlsq, cfg.fit_edge_rows)


def _integrate_surrogate(cfg, model, state, start, n_steps):
    eta = cfg.eta
    t0 = start * eta
    t1 = (start + n_steps) * eta
    report = [(start + j) * eta for j in range(1, n_steps + 1)]
    report[-1] = t1
    if cfg.mode is Mode.ADAM:
        s0 = AdamOdeState(state.a, state.m, state.v, t0)
        traj = integrate_adam_system(model, s0, t1, cfg.adam_params, cfg.integrator, report)
        f = traj.final
        final = AdamIterate(f.a, f.m, f.v, start + n_steps)
        positions = list(traj.a[:-1]) + [f.a]
        return final, positions
    res = integrate(lambda t, y: model(y), state, t0, t1, cfg.integrator, report, fixed_step=eta)
    positions = list(res.report_states[:-1]) + [res.y]
    return res.y, positions


def run_cycle(
    obj: Objective,
    a_in,
    cfg: LgfConfig,
    carry: Optional[AdamIterate] = None,
    epoch_offset: int = 0,
    budget: Optional[int] = None,
):
    """One retraining cycle starting after ``epoch_offset`` completed epochs.

    Returns ``(state, report)`` where ``state`` is the position after the
    cycle (an :class:`AdamIterate` in ADAM mode) and ``report`` a
    :class:`CycleReport`. ``budget`` caps the cycle length for the final
    partial cycle of a run.
    """
    K, M = cfg.history_size, cfg.retrain_interval
    length = M if budget is None else min(M, budget)
    n_true = min(K, length)
    n_sur = length - n_true
    E = epoch_offset

    if cfg.mode is Mode.ADAM:
        state = carry if carry is not None else AdamIterate.start(a_in)
        if state.k != E:
            raise ValueError(f"ADAM carry is at iteration {state.k}, cycle starts at {E}")
    else:
        state = np.asarray(a_in, dtype=float).copy()
    cycle = CycleReport(start_epoch=E, entry_carry=state if cfg.mode is Mode.ADAM else None)

    try:
        state = _cycle_body(obj, cfg, state, cycle, E, n_true, n_sur)
    except Exception as exc:
        # lets run_lgf keep the epochs completed before the failure
        exc.cycle = cycle
        raise
    if cfg.mode is Mode.ADAM:
        cycle.exit_carry = state
    return state, cycle


def _cycle_body(obj, cfg, state, cycle, E, n_true, n_sur):
    history = []
    for j in range(n_true):
        state = _true_step(obj, cfg, state, E + j, cycle, history if n_sur else None)
        if n_sur and cfg.mode is not Mode.ADAM:
            history.append(state.copy())
        cycle._log(E + j + 1, Phase.TRUE, _position(cfg, state))

    if n_sur:
        # GD/Newton windows hold the K post-step iterates; ADAM windows hold
        # the K iterates at which gradients were evaluated
        t_first = (E + 1) * cfg.eta if cfg.mode is not Mode.ADAM else E * cfg.eta
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            model = _fit_surrogate(cfg, history, cfg.eta, t_first)
        cycle.warnings.extend(f"epoch {E + n_true}: {w.message}" for w in caught)
        cycle.model = model
        start = E + n_true
        try:
            state, positions = _integrate_surrogate(cfg, model, state, start, n_sur)
            for j, pos in enumerate(positions):
                cycle._log(start + j + 1, Phase.SURROGATE, pos)
        except (IntegrationError, NonFinitePredictionError) as exc:
            if cfg.on_nonfinite is OnNonfinite.ERROR:
                raise
            msg = f"epoch {start}: surrogate integration failed ({exc}); true optimizer used for {n_sur} epochs"
            log.warning(msg)
            cycle.warnings.append(msg)
            for j in range(n_sur):
                state = _true_step(obj, cfg, state, start + j, cycle)
                cycle._log(start + j + 1, Phase.TRUE, _position(cfg, state))
            cycle.fallback_steps += n_sur
    return state


class _Recorder:
    def __init__(self, obj, cfg, a0):
        self.obj, self.cfg = obj, cfg
        self.epochs, self.states, self.losses, self.evals = [], [], [], []
        self.phases = []
        self.grad_evals = 0
        self._keep(0, Phase.TRUE, a0)

    def _keep(self, epoch, phase, state):
        self.epochs.append(epoch)
        self.states.append(np.array(state, dtype=float))
        if phase is Phase.TRUE or self.cfg.log_surrogate_loss:
            self.losses.append(self.obj.value(state))
        else:
            self.losses.append(np.nan)
        self.evals.append(self.grad_evals)

    def add(self, epoch, phase, state, last_epoch):
        self.phases.append(phase)
        if phase is Phase.TRUE:
            self.grad_evals += 1
        if epoch % self.cfg.record_every == 0 or epoch == last_epoch:
            self._keep(epoch, phase, state)

    def report(self, cfg, hessian_solves, warnings_, n_cycles, fallback, cycles, terminal):
        epochs = np.array(self.epochs)
        return RunReport(
            epochs=epochs,
            times=epochs * cfg.eta,
            trajectory=np.array(self.states),
            loss_history=np.array(self.losses),
            grad_evals_history=np.array(self.evals),
            phase_history=list(self.phases),
            true_gradient_evals=self.grad_evals,
            true_hessian_solves=hessian_solves,
            acceleration_percent=cfg.acceleration_percent,
            terminal_state=np.array(terminal, dtype=float),
            warnings=list(warnings_),
            n_cycles=n_cycles,
            fallback_steps=fallback,
            cycles=cycles,
        )


def run_lgf(obj: Objective, a0, cfg: LgfConfig, keep_cycles: bool = False) -> RunReport:
    """Alternate true-optimizer windows and surrogate integration over ``cfg.epochs``."""
    a0 = np.asarray(a0, dtype=float)
    if a0.shape != (obj.dim,):
        raise ValueError(f"initial state has shape {a0.shape}, problem dimension is {obj.dim}")
    if cfg.truncation_rank is not None and cfg.truncation_rank > obj.dim:
        raise ValueError(f"truncation_rank={cfg.truncation_rank} exceeds the dimension {obj.dim}")
    if cfg.mode is Mode.NEWTON and not obj.has_hessian:
        raise ValueError(f"{type(obj).__name__} has no Hessian; Newton mode is unavailable")

    rec = _Recorder(obj, cfg, a0)
    state = AdamIterate.start(a0) if cfg.mode is Mode.ADAM else a0.copy()
    E = 0
    hessian_solves = fallback = n_cycles = 0
    notes, cycles = [], []

    def partial(position):
        return rec.report(cfg, hessian_solves, notes, n_cycles, fallback, cycles, position)

    while E < cfg.epochs:
        try:
            out, cycle = run_cycle(
                obj,
                _position(cfg, state),
                cfg,
                carry=state if cfg.mode is Mode.ADAM else None,
                epoch_offset=E,
                budget=cfg.epochs - E,
            )
        except Exception as exc:
            failed = getattr(exc, "cycle", None)
            if failed is not None:
                for epoch, phase, pos in zip(failed.epochs, failed.phases, failed.states):
                    rec.add(epoch, phase, pos, cfg.epochs)
                hessian_solves += failed.hessian_solves
                notes.extend(failed.warnings)
            position = failed.states[-1] if failed is not None and failed.states else _position(cfg, state)
            raise LgfRunError(f"run failed in cycle starting at epoch {E}: {exc}", partial(position)) from exc
        for epoch, phase, pos in zip(cycle.epochs, cycle.phases, cycle.states):
            rec.add(epoch, phase, pos, cfg.epochs)
        hessian_solves += cycle.hessian_solves
        fallback += cycle.fallback_steps
        notes.extend(cycle.warnings)
        n_cycles += 1
        if keep_cycles:
            cycle.states = []
            cycles.append(cycle)
        state = out
        E = cycle.epochs[-1]
    return partial(_position(cfg, state))


def run_baseline(obj: Objective, a0, cfg: LgfConfig) -> RunReport:
    """The pure base optimizer for ``cfg.epochs`` epochs, logged like :func:`run_lgf`."""
    a0 = np.asarray(a0, dtype=float)
    rec = _Recorder(obj, cfg, a0)
    state = AdamIterate.start(a0) if cfg.mode is Mode.ADAM else a0.copy()
    counter = CycleReport(start_epoch=0)
    for e in range(cfg.epochs):
        try:
            state = _true_step(obj, cfg, state, e, counter)
        except Exception as exc:
            report = rec.report(cfg, counter.hessian_solves, [], 0, 0, [], _position(cfg, state))
            raise LgfRunError(f"baseline failed at epoch {e}: {exc}", report) from exc
        rec.add(e + 1, Phase.TRUE, _position(cfg, state), cfg.epochs)
    report = rec.report(cfg, counter.hessian_solves, [], 0, 0, [], _position(cfg, state))
    report.acceleration_percent = 0.0
    return report
