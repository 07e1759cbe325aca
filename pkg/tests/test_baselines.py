import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import two_bus
from gpccopf.baselines import (ScenarioSet, base_case, constraint_labels, constraint_limits,
                               full_recourse, mc_validate, recourse_dispatch, rmse, rmse_report,
                               scenario_cc_opf, violation_rates)
from gpccopf.errors import TooManyFailures, ValidationError
from gpccopf.gp import FitOptions, fit_multi
from gpccopf.grid import (Bus, Generator, GridCase, Injections, Line, Load, OutputSpec,
                          extract_outputs, solve_ac_pf)
from gpccopf.opf import ac_opf, generation_cost


def two_gen_case():
    """Cheap slack unit behind a rated line, expensive unit at the load bus."""
    buses = [Bus(1, "slack", 0.9, 1.1, 1.02), Bus(2, "pv", 0.9, 1.1, 1.0)]
    lines = [Line(1, 2, 1.0, -10.0, s_max=1.0)]
    gens = [Generator(1, 0.0, 3.0, -3.0, 3.0, c2=1.0, c1=1.0, p_ref=1.0),
            Generator(2, 0.0, 3.0, -3.0, 3.0, c2=1.0, c1=5.0, p_ref=0.5)]
    loads = [Load(2, 1.5, 0.3, sigma=0.225)]
    return GridCase(buses, lines, gens, loads, name="two-gen")


def _feasible_outputs(case, gen_p, load_p=None, res_p=None):
    """Power flow for a full dispatch; ``None`` if any monitored or generator limit breaks."""
    spec = OutputSpec.default(case)
    try:
        sol = solve_ac_pf(case, Injections.from_dispatch(case, gen_p, load_p, res_p))
    except Exception:
        return None
    h = np.concatenate([extract_outputs(case, sol, spec), sol.gen_p[case.controllable]])
    lo, hi = constraint_limits(case, spec)
    if np.any(h < lo - 1e-9) or np.any(h > hi + 1e-9):
        return None
    return sol


def _grid_opf(case, load_p=None):
    """1-D grid search over the non-slack unit at resolution 1e-3."""
    best = (np.inf, None)
    for p2 in np.arange(0.0, 3.0 + 1e-12, 1e-3):
        sol = _feasible_outputs(case, [0.0, p2], load_p)
        if sol is not None:
            best = min(best, (generation_cost(case, sol.gen_p), p2), key=lambda t: t[0])
    return best


# --- deterministic OPF ---------------------------------------------------------
def test_copper_plate_dispatch_equals_load():
    case = two_bus(load_p=0.8, g=0.0, b=-50.0, c2=2.0, c1=3.0)
    res = ac_opf(case)
    assert res.converged
    assert res.gen_p[0] == pytest.approx(0.8, abs=1e-9)
    assert res.cost == pytest.approx(2.0 * 0.64 + 3.0 * 0.8, rel=1e-9)


def test_two_bus_opf_matches_grid():
    case = two_gen_case()
    res = ac_opf(case)
    cost, p2 = _grid_opf(case)
    assert res.converged
    assert res.cost <= cost + 1e-9
    assert res.cost >= cost - 1e-2  # one grid cell of slope at most ~10
    assert abs(res.gen_p[1] - p2) <= 2e-3


def test_full_recourse_zero_scenarios_equals_base_case():
    case = two_gen_case()
    b = base_case(case)
    rec = full_recourse(case, ScenarioSet.zeros(case, 2))
    assert rec.failures == 0
    assert np.allclose(rec.costs, b.cost, rtol=1e-12)
    assert rec.mean_cost == pytest.approx(b.cost, rel=1e-12)


def test_full_recourse_two_scenarios_average():
    case = two_gen_case()
    sc = ScenarioSet(np.array([[0.1], [-0.15]]), case.injection_sigma, [1.0])
    rec = full_recourse(case, sc)
    oracle = [_grid_opf(case, case.load_p_ref + w)[0] for w in (0.1, -0.15)]
    assert rec.mean_cost == pytest.approx(np.mean(oracle), abs=1e-2)
    assert np.all(rec.costs <= np.array(oracle) + 1e-9)


# --- scenario CC-OPF -------------------------------------------------------------
def test_scenario_single_zero_reduces_to_base_case():
    case = two_gen_case()
    b = base_case(case)
    res = scenario_cc_opf(case, ScenarioSet.zeros(case, 1))
    assert res.converged
    assert np.allclose(res.u, b.u, atol=1e-5)
    # the objective still prices the reserve spread of the nominal sigma
    T = float(np.sum(case.injection_sigma ** 2))
    c2 = np.array([g.c2 for g in case.generators])
    assert res.cost == pytest.approx(b.cost + T * np.sum(c2 * res.alpha ** 2), rel=1e-6)


def _scenario_grid(case, sc, target):
    T = float(np.sum(sc.sigma ** 2))
    gens = case.generators

    def score(u1, a1):
        u, a = np.array([u1, target - u1]), np.array([a1, 1 - a1])
        for i in range(len(sc)):
            gen_p = recourse_dispatch(case, u, a, sc.imbalance[i])
            if _feasible_outputs(case, gen_p, *sc.injections(case, i)) is None:
                return np.inf
        return sum(g.c2 * (u[k] ** 2 + T * a[k] ** 2) + g.c1 * u[k] + g.c0
                   for k, g in enumerate(gens))

    best = (np.inf, None)
    for u1 in np.arange(0.0, target + 1e-12, 0.02):
        for a1 in np.arange(0.0, 1.0 + 1e-12, 0.02):
            best = min(best, (score(u1, a1), (u1, a1)), key=lambda t: t[0])
    cu, ca = best[1]
    for u1 in np.arange(cu - 0.02, cu + 0.02 + 1e-12, 1e-3):
        for a1 in np.arange(max(ca - 0.02, 0.0), min(ca + 0.02, 1.0) + 1e-12, 1e-3):
            best = min(best, (score(u1, a1), (u1, a1)), key=lambda t: t[0])
    return best


def test_scenario_matches_grid_search():
    case = two_gen_case()
    sc = ScenarioSet.sample(case, 3, seed=5, stream=2)
    res = scenario_cc_opf(case, sc)
    assert res.converged and res.max_violation <= 1e-6
    target = float(res.u.sum())
    cost, (u1, a1) = _scenario_grid(case, sc, target)
    assert res.cost <= cost + 1e-6
    assert abs(res.u[0] - u1) <= 2e-3 and abs(res.alpha[0] - a1) <= 2e-3


def test_scenario_sampling_is_deterministic(ieee9):
    a = ScenarioSet.sample(ieee9, 5, seed=3, stream=2)
    b = ScenarioSet.sample(ieee9, 5, seed=3, stream=2)
    c = ScenarioSet.sample(ieee9, 8, seed=3, stream=2)
    assert np.array_equal(a.omega, b.omega) and np.array_equal(a.omega, c.omega[:5])
    assert np.allclose(a.imbalance, a.omega[:, :3].sum(1) - a.omega[:, 3:].sum(1))


# --- Monte-Carlo validation --------------------------------------------------------
def test_mc_zero_sigma_is_deterministic_point(ieee9):
    b = base_case(ieee9)
    zero = np.zeros(ieee9.n_d)
    rep = mc_validate(ieee9, b.u, b.alpha, n_samples=20, sigma=zero)
    assert np.allclose(rep.std, 0.0, atol=1e-12)
    assert rep.joint_violation == 0.0
    # a dispatch that overloads a generator violates in every sample
    u = b.u.copy()
    u[1] += 2.5
    u[0] -= 0.5
    u[2] -= 0.5
    rep = mc_validate(ieee9, u, b.alpha, n_samples=20, sigma=zero)
    assert rep.joint_violation == 1.0


def test_violation_rates_binomial(rng):
    H = rng.standard_normal((1000, 1))
    hi = np.array([1.2815515655446004])  # 90% quantile
    lo, up, joint = violation_rates(H, np.array([-np.inf]), hi)
    half = 2.5758293035489 * np.sqrt(0.1 * 0.9 / 1000)
    assert abs(up[0] - 0.1) <= half and lo[0] == 0.0 and joint == up[0]


def test_failed_rows_count_as_violations():
    H = np.array([[0.5, 0.5], [np.nan, np.nan], [0.5, 2.0]])
    lo, up, joint = violation_rates(H, np.zeros(2), np.ones(2))
    assert joint == pytest.approx(2 / 3)
    assert np.allclose(up, [1 / 3, 2 / 3]) and np.allclose(lo, [1 / 3, 1 / 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3), st.floats(-5, 5))
def test_recourse_conservation(raw, omega):
    case = two_gen_case()
    a = np.array(raw[:2]) + 1e-3
    a /= a.sum()
    u = np.array([0.7, 0.9])
    gen_p = recourse_dispatch(case, u, a, omega)
    assert abs(gen_p[case.controllable].sum() - u.sum() - omega) <= 1e-12 * max(1.0, abs(omega))


def test_mc_report_is_reproducible(ieee9):
    b = base_case(ieee9)
    a = mc_validate(ieee9, b.u, b.alpha, n_samples=50, seed=4)
    c = mc_validate(ieee9, b.u, b.alpha, n_samples=50, seed=4)
    assert a.to_csv() == c.to_csv() and a.summary_text() == c.summary_text()
    header = a.to_csv().splitlines()[0].split(",")
    assert header[:3] == ["variable", "lower_limit", "upper_limit"]
    assert len(a.to_csv().splitlines()) == 1 + len(constraint_labels(ieee9, OutputSpec.default(ieee9)))
    assert "violation_definition" in json.loads(a.summary_text())


def test_mc_too_many_failures():
    case = two_bus(load_p=0.4, b=-1.0, p_max=10.0)
    with pytest.raises(TooManyFailures):
        mc_validate(case, [0.4], [1.0], n_samples=40, sigma=np.array([3.0]))


# --- accuracy metrics ---------------------------------------------------------------
def test_rmse_cases(rng):
    Y = rng.normal(size=(10, 3))
    assert np.all(rmse(Y, Y) == 0.0)
    off = Y.copy()
    off[:, 1] += 0.25
    assert np.allclose(rmse(Y, off), [0.0, 0.25, 0.0])
    P = rng.normal(size=(10, 3))
    loop = [np.sqrt(sum((Y[i, a] - P[i, a]) ** 2 for i in range(10)) / 10) for a in range(3)]
    assert np.allclose(rmse(Y, P), loop, rtol=1e-14)


def test_rmse_report_rejects_training_rows(rng):
    X = rng.normal(size=(8, 2))
    model = fit_multi(X, X[:, :1] * 2, FitOptions(restarts=1))
    with pytest.raises(ValidationError):
        rmse_report(model, X[:3], X[:3, :1] * 2)
    rep = rmse_report(model, X[:3] + 10.0, (X[:3, :1] + 10.0) * 2, labels=["y"])
    assert rep.to_csv().splitlines()[0] == "output,rmse" and rep.labels == ["y"]
