"""Benchmark objectives with analytic derivatives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
import scipy.linalg as sla

from .optim import Objective

__all__ = [
    "QuadraticProblem",
    "HeatInverseProblem",
    "PlaplaceProblem",
    "SyntheticLowRankProblem",
    "NoisyValleyProblem",
    "ProblemSpec",
    "PROBLEM_KINDS",
    "make_problem",
    "heat_forward_solve",
    "heat_objective_and_gradient",
    "plaplace_value_grad_hess",
]


def _as_state(a, n):
    a = np.asarray(a, dtype=float)
    if a.shape != (n,):
        raise ValueError(f"state has shape {a.shape}, expected ({n},)")
    return a


# ---------------------------------------------------------------------------
# Quadratic


class QuadraticProblem(Objective):
    """``z(a) = 1/2 a^T Q a - b^T a`` with symmetric positive-definite ``Q``."""

    has_hessian = True

    def __init__(self, q, b=None, init=None):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        if q.shape[0] != q.shape[1]:
            raise ValueError("Q must be square")
        if not np.allclose(q, q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(q).max())):
            raise ValueError("Q must be symmetric")
        try:
            self._chol = sla.cho_factor(q)
        except np.linalg.LinAlgError as exc:
            raise ValueError("Q must be positive definite") from exc
        self.q = q
        self.dim = q.shape[0]
        self.b = np.zeros(self.dim) if b is None else _as_state(b, self.dim)
        self._init = None if init is None else _as_state(init, self.dim)

    @classmethod
    def random(cls, n: int, seed: int = 0, cond: float = 10.0, b_scale: float = 1.0):
        """Random SPD ``Q`` with eigenvalues log-spaced in ``[1/cond, 1]`` scaled to ``[1, cond]``."""
        rng = np.random.default_rng(seed)
        basis, _ = np.linalg.qr(rng.standard_normal((n, n)))
        evals = np.geomspace(1.0, cond, n)
        q = (basis * evals) @ basis.T
        q = 0.5 * (q + q.T)
        return cls(q, b_scale * rng.standard_normal(n))

    @property
    def minimizer(self) -> np.ndarray:
        return sla.cho_solve(self._chol, self.b)

    def value(self, a):
        a = _as_state(a, self.dim)
        return float(0.5 * a @ self.q @ a - self.b @ a)

    def gradient(self, a, noise_key=None):
        return self.q @ _as_state(a, self.dim) - self.b

    def hessian_solve(self, a, rhs):
        return sla.cho_solve(self._chol, np.asarray(rhs, dtype=float))

    def initial_state(self, seed=0):
        if self._init is not None:
            return self._init.copy()
        return np.random.default_rng(seed).uniform(-2, 2, self.dim)


# ---------------------------------------------------------------------------
# 1D heat conduction inverse problem


def _cos_integral(k, lo, hi):
    # int_lo^hi cos(k pi x) dx
    if k == 0:
        return hi - lo
    return (np.sin(k * np.pi * hi) - np.sin(k * np.pi * lo)) / (k * np.pi)


def _stiffness_blocks(N):
    """Stiffness contributions of each bar half: K(a) = a1 K1 + a2 K2."""
    K1 = np.empty((N, N))
    K2 = np.empty((N, N))
    for i in range(1, N + 1):
        for j in range(1, N + 1):
            c = i * j * np.pi**2 / 2
            K1[i - 1, j - 1] = c * (_cos_integral(i - j, 0.0, 0.5) + _cos_integral(i + j, 0.0, 0.5))
            K2[i - 1, j - 1] = c * (_cos_integral(i - j, 0.5, 1.0) + _cos_integral(i + j, 0.5, 1.0))
    # symmetric by construction; enforce bitwise symmetry
    return 0.5 * (K1 + K1.T), 0.5 * (K2 + K2.T)


class HeatInverseProblem(Objective):
    """Recover the two conductivities of a bar from full-field temperature data.

    The bar ``[0, 1]`` has conductivity ``a1`` on the left half and ``a2`` on
    the right, homogeneous Dirichlet ends, zero initial temperature and source
    ``amplitude sin(2 pi x) sin(2 pi t)``. The temperature is expanded in
    ``n_modes`` sine modes and stepped with backward Euler; the measurement is
    the same discrete solution at ``a_true``.
    """

    has_hessian = True

    def __init__(
        self,
        n_modes: int = 30,
        dt: float = 0.0025,
        horizon: float = 0.125,
        a_true=(2.0, 1.0),
        amplitude: float = 2000.0,
        init=(1.0, 1.0),
    ):
        if n_modes < 1 or dt <= 0 or horizon <= 0:
            raise ValueError("n_modes, dt and horizon must be positive")
        self.dim = 2
        self.n_modes = n_modes
        self.dt = dt
        self.horizon = horizon
        self.n_steps = int(round(horizon / dt))
        self.amplitude = amplitude
        self.a_true = np.asarray(a_true, dtype=float)
        self._init = np.asarray(init, dtype=float)
        self.mass = 0.5 * np.eye(n_modes)
        self.k_blocks = _stiffness_blocks(n_modes)
        times = dt * np.arange(self.n_steps + 1)
        # int_0^1 sin(2 pi x) sin(j pi x) dx = 1/2 delta_{j,2}
        self.forcing = np.zeros((self.n_steps + 1, n_modes))
        if n_modes >= 2:
            self.forcing[:, 1] = 0.5 * amplitude * np.sin(2 * np.pi * times)
        self.times = times
        self.measurement = heat_forward_solve(self.a_true, self)

    def stiffness(self, a):
        K1, K2 = self.k_blocks
        return a[0] * K1 + a[1] * K2

    def value(self, a):
        return heat_objective_and_gradient(a, self, with_gradient=False)[0]

    def gradient(self, a, noise_key=None):
        return heat_objective_and_gradient(a, self)[1]

    def hessian(self, a):
        return heat_objective_and_gradient(a, self, with_hessian=True)[2]

    def hessian_solve(self, a, rhs):
        H = self.hessian(a)
        return np.linalg.solve(H, np.asarray(rhs, dtype=float))

    def initial_state(self, seed=0):
        return self._init.copy()


def _check_conductivity(a):
    a = np.asarray(a, dtype=float)
    if a.shape != (2,):
        raise ValueError("heat problem takes two conductivities")
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise ValueError(f"conductivities must be positive, got {a}")
    return a


def heat_forward_solve(a, problem: HeatInverseProblem) -> np.ndarray:
    """Backward-Euler modal trajectory, shape ``(n_steps + 1, n_modes)``."""
    a = _check_conductivity(a)
    m_dt = problem.mass / problem.dt
    factor = sla.cho_factor(m_dt + problem.stiffness(a))
    u = np.zeros((problem.n_steps + 1, problem.n_modes))
    for k in range(problem.n_steps):
        u[k + 1] = sla.cho_solve(factor, problem.forcing[k + 1] + m_dt @ u[k])
    return u


def _trapezoid(values, dt):
    return dt * (values.sum() - 0.5 * (values[0] + values[-1]))


def heat_objective_and_gradient(a, problem: HeatInverseProblem, with_gradient=True, with_hessian=False):
    """Misfit ``z(a)``, its gradient by discrete forward sensitivities, and optionally the Hessian.

    The spatial integral of the squared misfit is ``1/2 sum_i e_i^2`` by sine
    orthogonality; the time integral is the trapezoid rule on the step grid.
    Sensitivities ``s_i = du/da_i`` obey the differentiated recursion
    ``(M/dt + K) s_i[k+1] = (M/dt) s_i[k] - K_i u[k+1]``.
    """
    a = _check_conductivity(a)
    u = heat_forward_solve(a, problem)
    e = u - problem.measurement
    z = 0.5 * _trapezoid(0.5 * np.sum(e * e, axis=1), problem.dt)
    if not (with_gradient or with_hessian):
        return z, None, None

    m_dt = problem.mass / problem.dt
    factor = sla.cho_factor(m_dt + problem.stiffness(a))
    blocks = problem.k_blocks
    sens = [np.zeros_like(u) for _ in range(2)]
    for k in range(problem.n_steps):
        for i in range(2):
            sens[i][k + 1] = sla.cho_solve(factor, m_dt @ sens[i][k] - blocks[i] @ u[k + 1])
    grad = np.array([0.5 * _trapezoid(np.sum(e * s, axis=1), problem.dt) for s in sens])
    if not with_hessian:
        return z, grad, None

    H = np.empty((2, 2))
    for i in range(2):
        for j in range(i, 2):
            w = np.zeros_like(u)
            for k in range(problem.n_steps):
                rhs = m_dt @ w[k] - blocks[i] @ sens[j][k + 1] - blocks[j] @ sens[i][k + 1]
                w[k + 1] = sla.cho_solve(factor, rhs)
            integrand = np.sum(sens[i] * sens[j], axis=1) + np.sum(e * w, axis=1)
            H[i, j] = H[j, i] = 0.5 * _trapezoid(integrand, problem.dt)
    return z, grad, H


# ---------------------------------------------------------------------------
# Nonlinear (P-Laplace) heat conduction with radiation, solved by energy minimization


class PlaplaceProblem(Objective):
    """Variational energy of nonlinear heat conduction on the unit square.

    ``z = int kappa (grad u . grad u)^p + sigma/5 u^5 - b u`` with ``u`` expanded in
    ``sin(i pi x1) sin(j pi x2)``, ``i, j = 1..n_modes_per_dim``, integrated by
    the midpoint rule on a uniform ``quad_per_dim x quad_per_dim`` grid.
    Coefficient ``a[(i-1) * M + (j-1)]`` multiplies mode ``(i, j)``.
    """

    has_hessian = True

    def __init__(
        self,
        n_modes_per_dim: int = 15,
        p_order: int = 2,
        sigma: float = 4.0,
        quad_per_dim: int = 75,
        kappa_inside: float = 20.0,
        kappa_outside: float = 1.0,
        source_amplitude: float = 1e7,
        init_low: float = -3.0,
        init_high: float = 3.0,
    ):
        if p_order < 1:
            raise ValueError("p_order must be >= 1")
        M = n_modes_per_dim
        self.n_modes_per_dim = M
        self.dim = M * M
        self.p_order = p_order
        self.sigma = sigma
        self.init_range = (init_low, init_high)
        x = (np.arange(quad_per_dim) + 0.5) / quad_per_dim
        X1, X2 = np.meshgrid(x, x, indexing="ij")
        x1, x2 = X1.ravel(), X2.ravel()
        self.points = np.column_stack([x1, x2])
        self.weight = 1.0 / x1.size
        inside = np.maximum(np.abs(x1 - 0.5), np.abs(x2 - 0.5)) <= 0.25
        self.kappa = np.where(inside, kappa_inside, kappa_outside)
        self.source = source_amplitude * x1 * np.sin(4 * np.pi * x1) * np.sin(3 * np.pi * x2)

        k = np.arange(1, M + 1) * np.pi
        s1, c1 = np.sin(np.outer(x1, k)), np.cos(np.outer(x1, k))
        s2, c2 = np.sin(np.outer(x2, k)), np.cos(np.outer(x2, k))
        # basis values and gradients at quadrature points, shape (Q, M*M)
        self.f = (s1[:, :, None] * s2[:, None, :]).reshape(x1.size, -1)
        self.fx = ((c1 * k)[:, :, None] * s2[:, None, :]).reshape(x1.size, -1)
        self.fy = (s1[:, :, None] * (c2 * k)[:, None, :]).reshape(x1.size, -1)
        self.load = self.weight * (self.f.T @ self.source)

    def fields(self, a):
        a = _as_state(a, self.dim)
        return self.f @ a, self.fx @ a, self.fy @ a

    def value(self, a):
        return plaplace_value_grad_hess(a, self, need_grad=False)[0]

    def gradient(self, a, noise_key=None):
        return plaplace_value_grad_hess(a, self, need_grad=True)[1]

    def hessian(self, a):
        return plaplace_value_grad_hess(a, self, need_grad=False, need_hess=True)[2]

    def hessian_solve(self, a, rhs):
        H = self.hessian(a)
        return sla.solve(H, np.asarray(rhs, dtype=float), assume_a="sym", check_finite=True)

    def initial_state(self, seed=0):
        lo, hi = self.init_range
        return np.random.default_rng(seed).uniform(lo, hi, self.dim)

    def temperature_inner(self, a, b) -> float:
        """Quadrature of ``u_a u_b`` over the domain."""
        return float(self.weight * np.sum((self.f @ a) * (self.f @ b)))


def plaplace_value_grad_hess(a, problem: PlaplaceProblem, need_grad=True, need_hess=False):
    """Energy, gradient and dense Hessian sharing the per-point field values."""
    u, gx, gy = problem.fields(a)
    P, w, kap, sig = problem.p_order, problem.weight, problem.kappa, problem.sigma
    s = gx * gx + gy * gy
    z = w * np.sum(kap * s**P + sig / 5 * u**5 - problem.source * u)
    grad = hess = None
    if need_grad or need_hess:
        c_grad = 2 * P * kap * s ** (P - 1)
    if need_grad:
        grad = w * (problem.fx.T @ (c_grad * gx) + problem.fy.T @ (c_grad * gy) + problem.f.T @ (sig * u**4))
        grad -= problem.load
    if need_hess:
        hess = problem.fx.T @ (c_grad[:, None] * problem.fx) + problem.fy.T @ (c_grad[:, None] * problem.fy)
        hess += problem.f.T @ ((4 * sig * u**3)[:, None] * problem.f)
        if P >= 2:
            dir_grad = gx[:, None] * problem.fx + gy[:, None] * problem.fy
            c2 = 4 * kap * P * (P - 1) * s ** (P - 2)
            hess += dir_grad.T @ (c2[:, None] * dir_grad)
        hess *= w
        hess = 0.5 * (hess + hess.T)
    return float(z), grad, hess


# ---------------------------------------------------------------------------
# Synthetic high-dimensional problem with rank-2 dynamics


class SyntheticLowRankProblem(Objective):
    """``z(a) = 1/2 |W^T a - c|^2`` with orthonormal ``W`` of shape ``(n, 2)``.

    The gradient ``W (W^T a - c)`` always lies in ``span(W)``. The Hessian
    ``W W^T`` is singular, so Newton mode is not available.
    """

    def __init__(self, n: int = 2000, seed: int = 0, rank: int = 2):
        rng = np.random.default_rng(seed)
        self.dim = n
        self.rank = rank
        self.w, _ = np.linalg.qr(rng.standard_normal((n, rank)))
        self.c = rng.uniform(1.0, 3.0, rank) * rng.choice([-1.0, 1.0], rank)
        self.seed = seed

    def value(self, a):
        r = self.w.T @ _as_state(a, self.dim) - self.c
        return float(0.5 * r @ r)

    def gradient(self, a, noise_key=None):
        return self.w @ (self.w.T @ _as_state(a, self.dim) - self.c)

    def initial_state(self, seed=0):
        # starts inside span(W), where the flow is intrinsically rank-2
        y0 = np.random.default_rng([self.seed, seed]).uniform(-3.0, 3.0, self.rank)
        return self.w @ y0


# ---------------------------------------------------------------------------
# Rosenbrock valley with optional gradient noise


class NoisyValleyProblem(Objective):
    """Chained Rosenbrock function with additive Gaussian gradient noise.

    Noise for a call is drawn from a generator seeded with
    ``(seed, noise_key)``, so a run replays exactly given its keys.
    """

    has_hessian = True

    def __init__(self, n: int = 4, noise_sigma: float = 0.0, seed: int = 0, init=None):
        if n < 2:
            raise ValueError("valley needs n >= 2")
        self.dim = n
        self.noise_sigma = noise_sigma
        self.seed = seed
        self.stochastic = noise_sigma > 0
        self._init = np.full(n, -1.0) if init is None else _as_state(init, n)
        if init is None:
            self._init[1::2] = 1.0

    def value(self, a):
        a = _as_state(a, self.dim)
        return float(np.sum(100.0 * (a[1:] - a[:-1] ** 2) ** 2 + (1.0 - a[:-1]) ** 2))

    def exact_gradient(self, a):
        a = _as_state(a, self.dim)
        g = np.zeros_like(a)
        r = a[1:] - a[:-1] ** 2
        g[:-1] += -400.0 * a[:-1] * r - 2.0 * (1.0 - a[:-1])
        g[1:] += 200.0 * r
        return g

    def gradient(self, a, noise_key=None):
        g = self.exact_gradient(a)
        if self.noise_sigma > 0:
            key = 0 if noise_key is None else int(noise_key)
            rng = np.random.default_rng([self.seed, key])
            g = g + self.noise_sigma * rng.standard_normal(self.dim)
        return g

    def hessian(self, a):
        a = _as_state(a, self.dim)
        n = self.dim
        H = np.zeros((n, n))
        i = np.arange(n - 1)
        H[i, i] += 1200.0 * a[:-1] ** 2 - 400.0 * a[1:] + 2.0
        H[i + 1, i + 1] += 200.0
        H[i, i + 1] = H[i + 1, i] = -400.0 * a[:-1]
        return H

    def hessian_solve(self, a, rhs):
        return np.linalg.solve(self.hessian(a), np.asarray(rhs, dtype=float))

    def initial_state(self, seed=0):
        return self._init.copy()


# ---------------------------------------------------------------------------
# Factory


PROBLEM_KINDS = ("quadratic", "heat_inverse", "plaplace", "synthetic_lowrank", "noisy_valley")


@dataclass(frozen=True)
class ProblemSpec:
    """A problem kind plus its keyword parameters (see :func:`make_problem`)."""

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def get(self, key: str, default: Any = None) -> Any:
        return self.params.get(key, default)


_PARAMS = {
    "quadratic": {"n", "q_diag", "cond", "b", "init", "seed"},
    "heat_inverse": {"n_modes", "dt", "horizon", "init", "amplitude"},
    "plaplace": {"n_modes_per_dim", "p_order", "sigma", "quad_per_dim", "kappa_inside", "kappa_outside", "source_amplitude"},
    "synthetic_lowrank": {"n", "seed"},
    "noisy_valley": {"n", "noise_sigma", "seed", "init"},
}


def make_problem(spec: ProblemSpec) -> Objective:
    if spec.kind not in PROBLEM_KINDS:
        raise ValueError(f"unknown problem kind {spec.kind!r}; expected one of {PROBLEM_KINDS}")
    unknown = set(spec.params) - _PARAMS[spec.kind]
    if unknown:
        raise ValueError(f"unknown parameter(s) for {spec.kind}: {sorted(unknown)}")
    p = dict(spec.params)
    seed = int(p.pop("seed", spec.seed))
    if spec.kind == "quadratic":
        init = p.get("init")
        if "q_diag" in p:
            q = np.diag(np.asarray(p["q_diag"], dtype=float))
            n = q.shape[0]
            if "n" in p and int(p["n"]) != n:
                raise ValueError("quadratic: n does not match q_diag")
            b = np.zeros(n) if p.get("b") is None else np.asarray(p["b"], dtype=float)
            return QuadraticProblem(q, b, init)
        prob = QuadraticProblem.random(int(p.get("n", 2)), seed, float(p.get("cond", 10.0)))
        if p.get("b") is not None:
            prob.b = _as_state(p["b"], prob.dim)
        if init is not None:
            prob._init = _as_state(init, prob.dim)
        return prob
    if spec.kind == "heat_inverse":
        kwargs = {k: p[k] for k in ("n_modes", "dt", "horizon", "amplitude") if k in p}
        if "init" in p:
            kwargs["init"] = p["init"]
        return HeatInverseProblem(**kwargs)
    if spec.kind == "plaplace":
        return PlaplaceProblem(**p)
    if spec.kind == "synthetic_lowrank":
        return SyntheticLowRankProblem(n=int(p.get("n", 2000)), seed=seed)
    return NoisyValleyProblem(
        n=int(p.get("n", 4)), noise_sigma=float(p.get("noise_sigma", 0.0)), seed=seed, init=p.get("init")
    )
