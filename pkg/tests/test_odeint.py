import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from helpers import ulp_distance
from lgf.odeint import (
    AdamOdeState,
    IntegratorConfig,
    MaxStepsExceeded,
    Method,
    NonFiniteStateError,
    integrate,
    integrate_adam_system,
    semi_implicit_adam_step,
)
from lgf.optim import AdamIterate, AdamParams, adam_update

DEFAULT = IntegratorConfig()


def test_exponential_decay():
    res = integrate(lambda t, y: -y, [1.0], 0.0, 1.0)
    assert abs(res.y[0] - np.exp(-1)) <= max(DEFAULT.rtol * np.exp(-1), DEFAULT.atol) * 100


def test_zero_rhs_keeps_state_exactly():
    y0 = np.array([0.3, -7.25, 1e5])
    res = integrate(lambda t, y: np.zeros_like(y), y0, 0.0, 3.0)
    np.testing.assert_array_equal(res.y, y0)


def test_rotation_returns_after_full_period():
    res = integrate(lambda t, y: np.array([-y[1], y[0]]), [1.0, 0.0], 0.0, 2 * np.pi)
    np.testing.assert_allclose(res.y, [1.0, 0.0], atol=1e-5)


@pytest.mark.parametrize("lam", [-5.0, -1.0, 1.0])
def test_linear_growth_and_decay(lam):
    res = integrate(lambda t, y: lam * y, [2.0], 0.5, 1.5)
    exact = 2.0 * np.exp(lam)
    assert abs(res.y[0] - exact) <= 1e3 * DEFAULT.rtol * abs(exact)


def test_oscillator_energy_drift():
    res = integrate(lambda t, y: np.array([y[1], -y[0]]), [1.0, 0.0], 0.0, 20.0)
    energy = 0.5 * np.sum(res.y**2)
    assert abs(energy - 0.5) <= 1e-4 * 0.5


def test_tighter_tolerance_reduces_error():
    loose = IntegratorConfig(rtol=1e-5, atol=1e-7)
    tight = IntegratorConfig(rtol=1e-7, atol=1e-9)
    e1 = abs(integrate(lambda t, y: -y, [1.0], 0.0, 1.0, loose).y[0] - np.exp(-1))
    e2 = abs(integrate(lambda t, y: -y, [1.0], 0.0, 1.0, tight).y[0] - np.exp(-1))
    assert e2 <= e1 / 10


def test_agrees_with_reference_dopri_on_nonlinear_system():
    def lotka(t, y):
        return np.array([1.5 * y[0] - y[0] * y[1], -3.0 * y[1] + y[0] * y[1]])

    ref = solve_ivp(lotka, (0, 5), [10.0, 5.0], method="RK45", rtol=1e-11, atol=1e-12)
    res = integrate(lotka, [10.0, 5.0], 0.0, 5.0, IntegratorConfig(rtol=1e-10, atol=1e-12))
    np.testing.assert_allclose(res.y, ref.y[:, -1], rtol=1e-7)


def test_dense_output_at_report_times():
    times = np.linspace(0.1, 2.0, 20)
    res = integrate(lambda t, y: -y, [1.0], 0.0, 2.0, report_times=times)
    np.testing.assert_allclose(res.report_times, times)
    np.testing.assert_allclose(res.report_states[:, 0], np.exp(-times), rtol=1e-6)
    # dense output does not force steps onto the report grid
    assert res.n_steps < len(times)


def test_rk4_fixed_step():
    cfg = IntegratorConfig(method=Method.RK4_FIXED)
    res = integrate(lambda t, y: -y, [1.0], 0.0, 1.0, cfg, fixed_step=0.1)
    assert res.n_steps == 10
    assert abs(res.y[0] - np.exp(-1)) < 1e-6


def test_time_dependent_rhs():
    res = integrate(lambda t, y: np.array([np.cos(t)]), [0.0], 0.0, 2.0)
    assert abs(res.y[0] - np.sin(2.0)) < 1e-7


def test_errors():
    with pytest.raises(MaxStepsExceeded) as info:
        integrate(lambda t, y: -1e4 * y, [1.0], 0.0, 10.0, IntegratorConfig(max_steps=5))
    assert info.value.y is not None
    with pytest.raises(NonFiniteStateError) as info:
        integrate(lambda t, y: y**2, [1.0], 0.0, 2.0)
    assert info.value.t < 2.0
    with pytest.raises(ValueError):
        integrate(lambda t, y: y, [1.0], 1.0, 0.0)
    with pytest.raises(ValueError):
        IntegratorConfig(rtol=0.0)


# ---- augmented ADAM flow --------------------------------------------------


def test_adam_flow_fixed_point():
    s0 = AdamOdeState(np.array([1.0, -2.0]), np.zeros(2), np.zeros(2), 0.1)
    out = integrate_adam_system(lambda a: np.zeros_like(a), s0, 1.0, AdamParams(0.01)).final
    np.testing.assert_array_equal(out.a, s0.a)
    np.testing.assert_array_equal(out.m, 0.0)
    np.testing.assert_array_equal(out.v, 0.0)


def test_adam_flow_moment_decay():
    p = AdamParams(0.01)
    m0 = np.array([0.5, -1.0])
    s0 = AdamOdeState(np.zeros(2), m0, np.ones(2), 0.2)
    out = integrate_adam_system(lambda a: np.zeros_like(a), s0, 0.2 + p.eta, p).final
    np.testing.assert_allclose(out.m, m0 * np.exp(-(1 - p.beta1)), atol=1e-6)


def test_adam_flow_tracks_discrete_adam():
    p = AdamParams(0.01)
    s = AdamIterate.start(np.array([1.0]))
    for _ in range(10):
        s = adam_update(s, s.a, p)
    s0 = AdamOdeState(s.a, s.m, s.v, 10 * p.eta)
    flow = integrate_adam_system(lambda a: a, s0, 110 * p.eta, p).final
    for _ in range(100):
        s = adam_update(s, s.a, p)
    assert abs(flow.a[0] - s.a[0]) <= 0.05


def test_adam_flow_requires_positive_time():
    s0 = AdamOdeState(np.zeros(1), np.zeros(1), np.zeros(1), 0.0)
    with pytest.raises(ValueError):
        integrate_adam_system(lambda a: a, s0, 1.0, AdamParams(0.01))


def test_second_moment_clamping():
    s = AdamOdeState(np.zeros(2), np.zeros(2), np.array([-1e-13, 1.0]), 0.1)
    assert s.v[0] == 0.0
    with pytest.raises(ValueError):
        AdamOdeState(np.zeros(1), np.zeros(1), np.array([-1e-6]), 0.1)


def test_semi_implicit_step_examples():
    p = AdamParams(0.001)
    s = AdamOdeState(np.array([1.0, 2.0]), np.zeros(2), np.zeros(2), 0.0)
    out = semi_implicit_adam_step(s, np.zeros(2), 0, p)
    np.testing.assert_array_equal(out.a, s.a)
    assert out.t == p.eta
    m = np.array([0.3, -0.4])
    out = semi_implicit_adam_step(AdamOdeState(s.a, m, np.ones(2), 0.0), np.zeros(2), 3, p)
    np.testing.assert_array_equal(out.m, p.beta1 * m)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=1000, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(0, 5000),
    st.floats(1e-5, 1.0),
)
def test_semi_implicit_step_equals_discrete_adam(seed, k, eta):
    rng = np.random.default_rng(seed)
    n = 6
    a = rng.normal(scale=10, size=n)
    m = rng.normal(size=n)
    v = rng.exponential(size=n)
    g = rng.normal(scale=rng.choice([1e-3, 1.0, 1e3]), size=n)
    p = AdamParams(eta)
    flow = semi_implicit_adam_step(AdamOdeState(a, m, v, k * eta), g, k, p)
    disc = adam_update(AdamIterate(a, m, v, k), g, p)
    assert ulp_distance(flow.a, disc.a).max() <= 4
    assert ulp_distance(flow.m, disc.m).max() <= 4
    assert ulp_distance(flow.v, disc.v).max() <= 4
