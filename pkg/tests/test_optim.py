import numpy as np
import pytest

from helpers import ulp_distance
from lgf.odeint import AdamOdeState, semi_implicit_adam_step
from lgf.optim import (
    AdamIterate,
    AdamParams,
    Objective,
    SingularHessianError,
    adam_step,
    adam_update,
    gd_step,
    newton_step,
)
from lgf.problems import QuadraticProblem


class Quartic(Objective):
    """z = a^4 in one variable; the Hessian vanishes at 0."""

    dim = 1
    has_hessian = True

    def value(self, a):
        return float(a[0] ** 4)

    def gradient(self, a, noise_key=None):
        return 4 * np.asarray(a) ** 3

    def hessian_solve(self, a, rhs):
        return np.linalg.solve(np.array([[12 * a[0] ** 2]]), rhs)


class Flat(Objective):
    dim = 3

    def value(self, a):
        return 0.0

    def gradient(self, a, noise_key=None):
        return np.zeros(3)


class Broken(Objective):
    dim = 2

    def gradient(self, a, noise_key=None):
        return np.array([np.nan, 1.0])


def half_square(n=1):
    return QuadraticProblem(np.eye(n))


QUADRATICS = [QuadraticProblem.random(n, seed=s, cond=c) for n, s, c in [(2, 0, 3.0), (5, 1, 10.0), (8, 2, 50.0)]]


def test_gd_examples():
    np.testing.assert_allclose(gd_step(half_square(), [1.0], 0.1), [0.9])
    np.testing.assert_array_equal(gd_step(Flat(), [1.0, 2.0, 3.0], 0.5), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(gd_step(half_square(), [1.0], 1.0), [0.0])
    with pytest.raises(ValueError):
        gd_step(half_square(), [1.0], 0.0)
    with pytest.raises(FloatingPointError):
        gd_step(Broken(), [0.0, 0.0], 0.1)


@pytest.mark.parametrize("prob", QUADRATICS)
def test_gd_below_stability_limit_decreases(prob):
    L = np.linalg.eigvalsh(prob.q).max()
    a = prob.initial_state(3)
    z = prob.value(a)
    for _ in range(50):
        a = gd_step(prob, a, 1.9 / L)
        z_new = prob.value(a)
        assert z_new <= z
        z = z_new


@pytest.mark.parametrize("prob", QUADRATICS)
def test_full_newton_step_is_exact(prob):
    a = prob.initial_state(4)
    target = prob.minimizer
    np.testing.assert_allclose(newton_step(prob, a, 1.0), target, rtol=1e-10, atol=1e-10 * np.abs(target).max())
    damped = newton_step(prob, a, 0.15)
    np.testing.assert_allclose(damped, a + 0.15 * (target - a), rtol=1e-10, atol=1e-12)


def test_newton_singular_hessian():
    with pytest.raises(SingularHessianError):
        newton_step(Quartic(), np.array([0.0]), 1.0)
    with pytest.raises(NotImplementedError):
        newton_step(Flat(), np.zeros(3), 1.0)


def test_first_adam_step():
    p = AdamParams(1e-3)
    s = adam_update(AdamIterate.start([0.0]), [1.0], p)
    np.testing.assert_allclose(s.a, [-1e-3 / (1 + 1e-8)], rtol=1e-15)
    assert s.k == 1


def test_adam_with_zero_gradient_never_moves():
    s = AdamIterate.start(np.array([1.0, -1.0, 2.0]))
    for _ in range(20):
        s = adam_step(Flat(), s, AdamParams(0.1))
    np.testing.assert_array_equal(s.a, [1.0, -1.0, 2.0])
    assert np.all(s.v >= 0)


def test_adam_matches_semi_implicit_flow_step_for_200_steps():
    p = AdamParams(0.01)
    prob = half_square()
    disc = AdamIterate.start([1.0])
    flow = AdamOdeState(np.array([1.0]), np.zeros(1), np.zeros(1), 0.0)
    for k in range(200):
        g = prob.gradient(disc.a)
        disc = adam_update(disc, g, p)
        flow = semi_implicit_adam_step(flow, prob.gradient(flow.a), k, p)
        assert ulp_distance(disc.a, flow.a).max() <= 4
        assert np.all(disc.v >= 0)


def test_adam_params_validation():
    for kwargs in ({"beta1": 1.0}, {"beta2": -0.1}, {"epsilon": 0.0}):
        with pytest.raises(ValueError):
            AdamParams(0.01, **kwargs)
    with pytest.raises(ValueError):
        AdamParams(0.0)
