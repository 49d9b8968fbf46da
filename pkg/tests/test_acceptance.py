"""End-to-end acceptance checks at their stated tolerances.

Each test records a one-line measurement; the terminal summary prints a
PASS/FAIL line per criterion.
"""

import subprocess
import sys
import time
import tracemalloc
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from helpers import ulp_distance
from lgf.cli import parse_config
from lgf.driver import LgfConfig, LgfRunError, Mode, run_baseline, run_lgf
from lgf.odeint import AdamOdeState, semi_implicit_adam_step
from lgf.optim import AdamIterate, AdamParams, adam_update, gd_step
from lgf.problems import (
    HeatInverseProblem,
    NoisyValleyProblem,
    PlaplaceProblem,
    ProblemSpec,
    QuadraticProblem,
    SyntheticLowRankProblem,
    make_problem,
)

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


@pytest.fixture
def detail(request):
    def note(text):
        request.node.user_properties.append(("detail", text))

    return note


def load(name):
    cfg = parse_config((CONFIGS / name).read_text())
    return cfg, make_problem(cfg.problem)


def test_criterion_1_semi_implicit_step_equals_discrete_adam(detail):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0
    n_fixtures = 1200
    for _ in range(n_fixtures):
        n = int(rng.integers(1, 9))
        params = AdamParams(
            eta=10 ** rng.uniform(-5, 0),
            beta1=rng.uniform(0.0, 0.99),
            beta2=rng.uniform(0.9, 0.9999),
            epsilon=10 ** rng.uniform(-10, -4),
        )
        scale = 10 ** rng.uniform(-3, 3, n)
        a = rng.standard_normal(n) * scale
        m = rng.standard_normal(n) * scale
        v = rng.uniform(0, 1, n) * scale**2
        g = rng.standard_normal(n) * scale
        k = int(rng.integers(0, 5000))
        disc = adam_update(AdamIterate(a, m, v, k), g, params)
        flow = semi_implicit_adam_step(AdamOdeState(a, m, v, k * params.eta), g, k, params)
        worst = max(worst, ulp_distance(flow.a, disc.a).max(), ulp_distance(flow.m, disc.m).max(),
                    ulp_distance(flow.v, disc.v).max())
    elapsed = time.perf_counter() - start
    detail(f"{n_fixtures} fixtures, worst {worst} ulp, {elapsed:.2f} s")
    assert worst <= 4
    assert elapsed < 1.0


def _identity_cases():
    quad = QuadraticProblem.random(5, seed=0)
    heat = HeatInverseProblem()
    plap = PlaplaceProblem()
    low = SyntheticLowRankProblem(n=2000, seed=0)
    valley = NoisyValleyProblem(noise_sigma=0.5, seed=2)
    # per-mode step sizes that keep each pure optimizer finite for 50 epochs
    return [
        (quad, Mode.GRADIENT_DESCENT, 0.02), (quad, Mode.NEWTON, 0.5), (quad, Mode.ADAM, 0.01),
        (heat, Mode.GRADIENT_DESCENT, 0.01), (heat, Mode.NEWTON, 0.5), (heat, Mode.ADAM, 0.01),
        (plap, Mode.GRADIENT_DESCENT, 1e-12), (plap, Mode.NEWTON, 0.15), (plap, Mode.ADAM, 0.01),
        (low, Mode.GRADIENT_DESCENT, 0.1), (low, Mode.ADAM, 0.01),
        (valley, Mode.GRADIENT_DESCENT, 1e-3), (valley, Mode.NEWTON, 0.5), (valley, Mode.ADAM, 0.01),
    ]


def test_criterion_2_equal_schedule_is_the_base_optimizer(detail):
    start = time.perf_counter()
    cases = _identity_cases()
    mismatched = []
    for obj, mode, eta in cases:
        cfg = LgfConfig(mode=mode, eta=eta, history_size=10, retrain_interval=10, epochs=50)
        a0 = obj.initial_state(0)
        lgf, base = run_lgf(obj, a0, cfg), run_baseline(obj, a0, cfg)
        same = (
            lgf.trajectory.tobytes() == base.trajectory.tobytes()
            and lgf.terminal_state.tobytes() == base.terminal_state.tobytes()
            and lgf.loss_history.tobytes() == base.loss_history.tobytes()
            and lgf.true_gradient_evals == base.true_gradient_evals
        )
        if not same:
            mismatched.append(f"{type(obj).__name__}/{mode.value}")
    elapsed = time.perf_counter() - start
    detail(f"{len(cases)} kind/mode pairs, mismatches {mismatched or 'none'}, {elapsed:.1f} s "
           "(no Newton on the low-rank problem: its Hessian is singular)")
    assert not mismatched
    assert elapsed < 30.0


def test_criterion_3_linear_flow_matches_gd_on_quadratic(detail):
    start = time.perf_counter()
    obj = QuadraticProblem.random(5, seed=0)
    a0 = obj.initial_state(0)
    cfg = LgfConfig(mode=Mode.GRADIENT_DESCENT, eta=0.02, history_size=10, retrain_interval=100,
                    poly_order=1, epochs=400)
    lgf = run_lgf(obj, a0, cfg)
    a = a0.copy()
    for _ in range(400):
        a = gd_step(obj, a, 0.02)
    err = np.linalg.norm(lgf.terminal_state - a) / np.linalg.norm(a)
    elapsed = time.perf_counter() - start
    detail(f"relative error {err:.2e}, {elapsed:.2f} s")
    assert err <= 1e-3
    assert elapsed < 5.0


def test_criterion_4_heat_inverse_recovers_conductivities(detail):
    cfg, obj = load("heat_inverse.cfg")
    lc = cfg.lgf
    assert (lc.eta, lc.history_size, lc.retrain_interval, lc.poly_order, lc.epochs) == (0.01, 10, 30, 1, 700)
    assert obj.n_modes == 30
    report = run_lgf(obj, obj.initial_state(cfg.seed), lc)
    a = report.terminal_state
    loss = obj.value(a)
    detail(f"a = [{a[0]:.4f}, {a[1]:.4f}], loss {loss:.2e}, acceleration {report.acceleration_percent:g}%, "
           f"{report.true_gradient_evals} gradient evals")
    assert np.all(np.abs(a - [1.97, 1.04]) <= 0.1)
    assert loss <= 1e-3
    assert report.acceleration_percent == 200.0


@pytest.fixture(scope="module")
def plaplace_runs():
    cfg, obj = load("plaplace_newton.cfg")
    a0 = obj.initial_state(cfg.seed)
    lgf = run_lgf(obj, a0, cfg.lgf)
    base = run_baseline(obj, a0, cfg.lgf)
    return cfg, obj, a0, lgf, base


def test_criterion_5_plaplace_newton(plaplace_runs, detail):
    cfg, obj, a0, lgf, base = plaplace_runs
    lc = cfg.lgf
    assert obj.dim == 225
    assert (lc.eta, lc.history_size, lc.retrain_interval, lc.poly_order, lc.epochs) == (0.15, 15, 20, 1, 300)
    g0 = np.linalg.norm(obj.gradient(a0))
    g_end = np.linalg.norm(obj.gradient(lgf.terminal_state))
    d = lgf.terminal_state - base.terminal_state
    field_diff = obj.temperature_inner(d, d) / obj.temperature_inner(base.terminal_state, base.terminal_state)
    detail(f"initial gradient norm {g0:.3g}, reduced by {g0 / g_end:.3g}x, normalized field difference "
           f"{field_diff:.2e}")
    assert 1e10 <= g0 < 1e12
    assert g0 / g_end >= 1e10
    assert field_diff <= 1e-8


def test_criterion_6_over_aggressive_schedule_degrades(plaplace_runs, detail):
    cfg, obj, a0, lgf, _ = plaplace_runs
    aggressive = replace(cfg.lgf, retrain_interval=30)
    try:
        terminal = run_lgf(obj, a0, aggressive).terminal_state
    except LgfRunError as exc:
        terminal = exc.report.terminal_state
    with np.errstate(all="ignore"):
        g30 = np.linalg.norm(obj.gradient(terminal))
    g20 = np.linalg.norm(obj.gradient(lgf.terminal_state))
    detail(f"terminal gradient norm M=20 {g20:.3g}, M=30 {g30:.3g}")
    assert not np.isfinite(g30) or g30 >= 10 * g20


def test_criterion_7_reduced_surrogate_on_low_rank_problem(detail):
    start = time.perf_counter()
    n, K, r = 2000, 20, 2
    obj = SyntheticLowRankProblem(n=n, seed=0, rank=2)
    a0 = obj.initial_state(0)
    cfg = LgfConfig(mode=Mode.GRADIENT_DESCENT, eta=0.1, history_size=K, retrain_interval=40, poly_order=1,
                    epochs=200, truncation_rank=r, record_every=200)
    a = a0.copy()
    for _ in range(200):
        a = gd_step(obj, a, 0.1)

    tracemalloc.start()
    run_baseline(obj, a0, cfg)
    base_peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    tracemalloc.start()
    lgf = run_lgf(obj, a0, cfg)
    lgf_peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()

    err = np.linalg.norm(lgf.terminal_state - a) / np.linalg.norm(a)
    budget = (n * K + n * r) * 8
    extra = (lgf_peak - base_peak) / budget
    elapsed = time.perf_counter() - start
    detail(f"relative error {err:.2e}, surrogate memory {extra:.2f} x (nK + nr) doubles, {elapsed:.2f} s")
    assert err <= 1e-3
    # a dense n x n operator would be 100x this budget
    assert extra <= 8.0
    assert elapsed < 10.0


def test_criterion_8_adam_surrogate_on_noisy_valley(detail):
    start = time.perf_counter()
    cfg, noisy = load("noisy_valley_adam.cfg")
    assert noisy.noise_sigma > 0 and cfg.lgf.poly_order == 2
    assert (cfg.lgf.history_size, cfg.lgf.retrain_interval) == (20, 30)
    adam = cfg.lgf.adam_params
    assert (adam.beta1, adam.beta2, adam.epsilon) == (0.9, 0.999, 1e-8)
    clean = make_problem(ProblemSpec("noisy_valley", {**cfg.problem.params, "noise_sigma": 0.0}))
    ratios = {}
    for label, obj in (("sigma=0", clean), (f"sigma={noisy.noise_sigma:g}", noisy)):
        a0 = obj.initial_state(cfg.seed)
        lgf = run_lgf(obj, a0, cfg.lgf)
        base = run_baseline(obj, a0, cfg.lgf)
        ratios[label] = noisy.value(lgf.terminal_state) / noisy.value(base.terminal_state)
        accel = lgf.acceleration_percent
    elapsed = time.perf_counter() - start
    detail(", ".join(f"{k} loss ratio {v:.3f}" for k, v in ratios.items())
           + f", acceleration {accel:g}%, {elapsed:.1f} s")
    clean_ratio, noisy_ratio = ratios.values()
    assert clean_ratio <= 2.0
    assert noisy_ratio <= 5.0
    assert accel == 50.0
    assert elapsed < 30.0


COMPONENT_SUITES = ["polylib", "sindy", "reduction", "odeint", "optim", "problems"]


def test_criterion_9_component_suites(detail):
    files = [str(ROOT / "tests" / f"test_{name}.py") for name in COMPONENT_SUITES]
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *files],
                          capture_output=True, text=True, cwd=ROOT)
    elapsed = time.perf_counter() - start
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    detail(f"{tail.strip('= ')}, {elapsed:.1f} s")
    assert proc.returncode == 0, proc.stdout[-2000:]
    assert elapsed < 60.0
