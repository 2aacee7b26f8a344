import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from continuum.solvers import (CANONICAL_PROBLEMS, DivergenceError, GlobalErrorReport, IntegrationConfig, SolverKind,
                               decay_problem, estimate_convergence_order, estimate_lipschitz, fit_order,
                               forced_linear_problem, growth_envelope, integrate, march, min_separation,
                               rk4_step, roundtrip_error)

H = [2.0 ** -k for k in range(3, 10)]
ORDER_TOL = {SolverKind.EULER: 0.15, SolverKind.AB2: 0.25, SolverKind.ABM2: 0.25, SolverKind.RK4: 0.35}


def decay(t, x):
    return -x


def test_single_euler_step():
    assert integrate(decay, 1.0, IntegrationConfig(0.0, 0.5, 1), "euler") == 0.5


def test_single_rk4_step_hand_value():
    assert integrate(decay, 1.0, IntegrationConfig(0.0, 1.0, 1), "rk4") == pytest.approx(0.375, abs=1e-15)
    assert rk4_step(decay, 0.0, 1.0, 1.0) == pytest.approx(0.375, abs=1e-15)


@pytest.mark.parametrize("kind", list(SolverKind))
def test_zero_field_returns_x0_exactly(kind):
    x0 = np.array([1.5, -2.25, 3.0])
    out = integrate(lambda t, x: np.zeros_like(x), x0, IntegrationConfig(0.0, 2.0, 7), kind)
    np.testing.assert_array_equal(out, x0)


@settings(max_examples=30, deadline=None)
@given(lam=st.floats(-5, 5), h=st.floats(1e-3, 1.0), x0=st.floats(-10, 10))
def test_euler_linear_step_is_exact(lam, h, x0):
    got = integrate(lambda t, x: lam * x, x0, IntegrationConfig(0.0, h, 1), "euler")
    assert got == x0 + h * (lam * x0)
    assert abs(got - (1 + lam * h) * x0) <= 8 * np.finfo(float).eps * max(abs(x0), 1e-300) * (1 + abs(lam))


@pytest.mark.parametrize("kind", list(SolverKind))
@pytest.mark.parametrize("problem", sorted(CANONICAL_PROBLEMS))
def test_convergence_order(kind, problem):
    rep = estimate_convergence_order(CANONICAL_PROBLEMS[problem](), kind, H)
    assert abs(rep.fitted_order - kind.order) <= ORDER_TOL[kind]


def test_order_examples_on_decay():
    h = [2.0 ** -k for k in range(3, 9)]
    assert 0.9 <= estimate_convergence_order(decay_problem(), "euler", h).fitted_order <= 1.1
    assert 1.8 <= estimate_convergence_order(decay_problem(), "ab2", h).fitted_order <= 2.2
    assert 3.7 <= estimate_convergence_order(decay_problem(), "rk4", h).fitted_order <= 4.3


def test_forced_problem_exact_solution_matches_symbolic():
    t = sp.symbols("t")
    x = sp.Function("x")
    lam, om = sp.Rational(-1, 2), 2
    sol = sp.dsolve(sp.Eq(x(t).diff(t), lam * x(t) + sp.sin(om * t)), x(t), ics={x(0): 1}).rhs
    f = sp.lambdify(t, sol, "math")
    prob = forced_linear_problem(-0.5, 2.0)
    for tv in np.linspace(0.0, 1.0, 11):
        assert prob.exact(tv) == pytest.approx(f(tv), abs=1e-13)


def test_order_precondition_errors():
    with pytest.raises(ValueError):
        estimate_convergence_order(decay_problem(), "rk4", [0.1, 0.05, 0.025])
    with pytest.raises(ValueError):
        estimate_convergence_order(decay_problem(), "rk4", [0.125, 0.1, 0.0625, 0.05])


def test_fit_order_recovers_power_law():
    h = np.array(H)
    assert fit_order(h, 3.0 * h ** 2.5) == pytest.approx(2.5, abs=1e-12)


def test_report_csv_roundtrip():
    rep = estimate_convergence_order(decay_problem(), "ab2", H)
    text = rep.to_csv()
    assert text.splitlines()[0] == "h,error"
    back = GlobalErrorReport.from_csv(text)
    assert back.h_values == rep.h_values and back.errors == rep.errors
    assert back.fitted_order == rep.fitted_order


@pytest.mark.parametrize("kind", list(SolverKind))
def test_determinism(kind):
    prob = forced_linear_problem()
    a = integrate(prob.field, prob.x0, IntegrationConfig(0, 1, 33), kind, trajectory=True)
    b = integrate(prob.field, prob.x0, IntegrationConfig(0, 1, 33), kind, trajectory=True)
    assert np.array_equal(np.array(a, dtype=float), np.array(b, dtype=float))


def test_trajectory_length():
    traj = integrate(decay, 1.0, IntegrationConfig(0, 1, 5), "ab2", trajectory=True)
    assert len(traj) == 6 and traj[0] == 1.0


def test_divergence_is_reported():
    with pytest.raises(DivergenceError) as info:
        integrate(lambda t, x: x * x, 1.0, IntegrationConfig(0, 10, 50), "euler")
    assert info.value.step >= 1
    with pytest.raises(DivergenceError):
        integrate(decay, np.array([np.nan]), IntegrationConfig(0, 1, 2))


def test_march_on_step_sees_every_state():
    seen = []
    march(decay, 1.0, 0.0, 0.1, 4, "rk4", on_step=seen.append)
    assert len(seen) == 5


def test_integration_config_validation():
    with pytest.raises(ValueError):
        IntegrationConfig(0, 1, 0)
    with pytest.raises(ValueError):
        IntegrationConfig(1, 1, 3)
    assert IntegrationConfig(0, 2, 4).h == 0.5


def test_solver_parse():
    assert SolverKind.parse("RK4") is SolverKind.RK4
    with pytest.raises(ValueError):
        SolverKind.parse("midpoint")


def test_lipschitz_linear_field():
    est = estimate_lipschitz(lambda t, x: 3.0 * x, (np.array([-1.0]), np.array([1.0])), samples=50, seed=1)
    assert 2.9 <= est <= 3.0 * (1 + 1e-9)


def test_lipschitz_zero_field():
    assert estimate_lipschitz(lambda t, x: 0.0 * x, (np.zeros(2) - 1, np.ones(2)), samples=10) == 0.0


def test_lipschitz_bad_inputs():
    with pytest.raises(ValueError):
        estimate_lipschitz(decay, (np.zeros(1), np.ones(1)), samples=1)
    with pytest.raises(ValueError):
        estimate_lipschitz(decay, (np.zeros(1), np.zeros(1)), samples=5)


def test_non_intersection_on_smooth_problems():
    cfg = IntegrationConfig(0.0, 1.0, 1000)
    for make in CANONICAL_PROBLEMS.values():
        prob = make()
        assert min_separation(prob.field, 1.0, 1.001, cfg) > 1e-9


def test_roundtrip_error_scales_as_h4():
    prob = forced_linear_problem()
    hs = [0.25, 0.125, 0.0625]
    errs = [roundtrip_error(prob.field, prob.x0, IntegrationConfig(0, 1, int(round(1 / h)))) for h in hs]
    c = errs[0] / hs[0] ** 4
    for h, e in zip(hs, errs):
        assert e <= 1.5 * c * h ** 4


def test_growth_envelope_bounds_trajectory():
    lam = 1.3
    traj = integrate(lambda t, x: lam * x, np.array([0.7]), IntegrationConfig(0, 1, 40), "rk4", trajectory=True)
    for k, x in enumerate(traj):
        assert abs(x[0]) <= growth_envelope(0.7, lam, k / 40) * (1 + 1e-9)
    assert growth_envelope(2.0, 0.0, 3.0, 1.0) == 5.0
    assert growth_envelope(1.0, 1.0, 1.0) == pytest.approx(math.e)
