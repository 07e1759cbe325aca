import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import bisect

from conftest import two_bus
from gpccopf import backend
from gpccopf._core_py import newton_pf as newton_py
from gpccopf.errors import NonConvergence, ParseError, SpecMismatch, ValidationError
from gpccopf.grid import (Bus, Generator, GridCase, Injections, Line, OutputSpec, dump_case,
                          evaluate_outputs, extract_outputs, line_flows, load_case, parse_case,
                          solve_ac_pf)
from gpccopf.grid.io import DATA_DIR, parse_matpower
from gpccopf.grid.powerflow import bus_power

CASE9_M = (DATA_DIR / "case9.m").read_text()


def _solve(case, **kw):
    return solve_ac_pf(case, Injections.from_dispatch(case, **kw))


def _pi_flow(va, vb, d, g, b, b_sh, self_tap, cross_tap):
    """Scalar trig expansion of the flow leaving one end of a pi-model branch."""
    p = (va / self_tap) ** 2 * g - va * vb / cross_tap * (g * math.cos(d) + b * math.sin(d))
    q = (-(va / self_tap) ** 2 * (b + b_sh / 2)
         - va * vb / cross_tap * (g * math.sin(d) - b * math.cos(d)))
    return p, q


# --- power flow ------------------------------------------------------------
def test_zero_injection_gives_flat_solution():
    case = two_bus(load_p=0.0)
    sol = _solve(case)
    assert np.allclose(sol.theta, 0.0)
    assert np.allclose(sol.v, 1.0)
    assert np.allclose(sol.s, 0.0, atol=1e-12)


def test_two_bus_angle_matches_bisection():
    case = two_bus(load_p=0.5, b=-10.0)
    sol = _solve(case)
    v1, v2 = sol.v
    theta = bisect(lambda t: v1 * v2 * 10.0 * math.sin(t) - 0.5, 0.0, 1.0, xtol=1e-15)
    assert sol.theta[1] == pytest.approx(-theta, abs=1e-9)
    assert sol.residual < 1e-8


def test_line_flow_closed_forms():
    case = two_bus(load_p=0.0, b=-5.0)
    v = np.ones(2)
    p_from, *_ = line_flows(case, v, np.zeros(2))
    assert p_from[0] == pytest.approx(0.0, abs=1e-15)
    p_from, *_ = line_flows(case, v, np.array([math.pi / 6, 0.0]))
    assert p_from[0] == pytest.approx(2.5, rel=1e-12)


def test_line_flows_match_scalar_oracle(rng):
    buses = [Bus(1, "slack", 0.9, 1.1, 1.0), Bus(2, "pq"), Bus(3, "pq"), Bus(4, "pq")]
    lines = [Line(1, 2, 1.5, -8.0, b_sh=0.04), Line(2, 3, 0.7, -5.0, b_sh=0.02, tap=1.05),
             Line(3, 4, 2.0, -12.0), Line(4, 1, 0.3, -3.0, b_sh=0.1, tap=0.97)]
    case = GridCase(buses, lines, [Generator(1, 0, 5, -5, 5)])
    v = rng.uniform(0.9, 1.1, 4)
    th = rng.uniform(-0.3, 0.3, 4)
    pf, qf, pt, qt, s = line_flows(case, v, th)
    for k, l in enumerate(lines):
        f, t = l.from_bus - 1, l.to_bus - 1
        p_ref, q_ref = _pi_flow(v[f], v[t], th[f] - th[t], l.g, l.b, l.b_sh, l.tap, l.tap)
        assert pf[k] == pytest.approx(p_ref, rel=1e-12, abs=1e-14)
        assert qf[k] == pytest.approx(q_ref, rel=1e-12, abs=1e-14)
        # the tap sits on the from side, so the to end only sees it in the cross term
        p_ref, q_ref = _pi_flow(v[t], v[f], th[t] - th[f], l.g, l.b, l.b_sh, 1.0, l.tap)
        assert pt[k] == pytest.approx(p_ref, rel=1e-12, abs=1e-14)
        assert qt[k] == pytest.approx(q_ref, rel=1e-12, abs=1e-14)
        assert s[k] == pytest.approx(max(math.hypot(pf[k], qf[k]), math.hypot(pt[k], qt[k])))


@pytest.mark.parametrize("name", ["ieee9", "ieee39"])
def test_bundled_cases_converge(name):
    case = load_case(name)
    sol = _solve(case)
    assert sol.converged and sol.iterations <= 10 and sol.residual < 1e-8
    P, Q = bus_power(case, sol.v, sol.theta)
    inj = Injections.from_dispatch(case)
    mask = np.ones(case.n_bus, bool)
    mask[case.slack] = False
    assert np.max(np.abs(P - inj.p)[mask]) < 1e-8
    assert np.max(np.abs(Q - inj.q)[case.pq]) < 1e-8


def test_ieee9_generation_to_load_ratio(ieee9):
    sol = _solve(ieee9)
    ratio = sol.gen_p.sum() / (ieee9.load_p_ref.sum() - ieee9.res_p_ref.sum())
    assert ratio == pytest.approx(1.0139, abs=1e-3)
    assert ieee9.loss_factor == pytest.approx(ratio, rel=1e-6)


def test_ieee39_loss_factor(ieee39):
    assert ieee39.loss_factor == pytest.approx(1.0086, abs=1e-3)


def test_nonconvergence_carries_last_iterate():
    case = two_bus(load_p=20.0, p_max=50.0)
    with pytest.raises(NonConvergence) as exc:
        solve_ac_pf(case, Injections.from_dispatch(case), max_iter=3)
    assert exc.value.solution is not None and not exc.value.solution.converged


def test_backends_agree(ieee39):
    if not backend.COMPILED:
        pytest.skip("compiled extension not built")
    inj = Injections.from_dispatch(ieee39)
    pvpq = np.sort(np.concatenate([ieee39.pv, ieee39.pq]))
    out = []
    for fn in (backend.core.newton_pf, newton_py):
        v, th = np.ones(ieee39.n_bus), np.zeros(ieee39.n_bus)
        fixed = np.concatenate([[ieee39.slack], ieee39.pv])
        v[fixed] = ieee39.v_set[fixed]
        status, iters, _ = fn(ieee39.g_matrix, ieee39.b_matrix, v, th, inj.p, inj.q, pvpq,
                              ieee39.pq, 1e-10, 20)
        out.append((status, iters, v, th))
    assert out[0][:2] == out[1][:2]
    assert np.allclose(out[0][2], out[1][2], atol=1e-12)
    assert np.allclose(out[0][3], out[1][3], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.5), st.floats(-0.4, 0.4), st.floats(0.95, 1.05), st.floats(0.0, 0.5))
def test_pf_properties(load_p, load_q, v_set, g):
    case = two_bus(load_p=load_p, load_q=load_q, g=g, b=-10.0, v_set=v_set)
    try:
        sol = _solve(case)
    except NonConvergence:
        return
    # mismatch, apparent power identity and active balance over the network
    inj = Injections.from_dispatch(case)
    P, Q = bus_power(case, sol.v, sol.theta)
    assert abs(P[1] - inj.p[1]) < 1e-8 and abs(Q[1] - inj.q[1]) < 1e-8
    assert np.allclose(sol.s ** 2, np.maximum(sol.p_from ** 2 + sol.q_from ** 2,
                                              sol.p_to ** 2 + sol.q_to ** 2))
    assert sol.slack_p == pytest.approx(load_p + sol.losses, abs=1e-8)
    again = _solve(case)
    assert np.array_equal(again.v, sol.v) and np.array_equal(again.theta, sol.theta)


# --- outputs ---------------------------------------------------------------
def test_default_output_counts(ieee9, ieee39):
    assert len(OutputSpec.default(ieee9)) == 15
    assert len(OutputSpec.default(ieee39)) == 74
    assert len(ieee39.controllable) + ieee39.n_d == 37


def test_spec_without_lines(ieee9):
    spec = OutputSpec(voltage_buses=(5, 7), reactive_gens=(0, 2))
    y = extract_outputs(ieee9, _solve(ieee9), spec)
    assert y.shape == (4,)
    assert spec.labels(ieee9) == ["v:5", "v:7", "q:g0@1", "q:g2@3"]


def test_spec_mismatch(ieee9):
    with pytest.raises(SpecMismatch):
        extract_outputs(ieee9, _solve(ieee9), OutputSpec(voltage_buses=(99,)))
    with pytest.raises(SpecMismatch):
        extract_outputs(ieee9, _solve(ieee9), OutputSpec(flow_lines=(40,)))


def test_evaluate_outputs_matches_manual(ieee9):
    spec = OutputSpec.default(ieee9)
    y, sol = evaluate_outputs(ieee9, ieee9.gen_p_ref, ieee9.load_p_ref, ieee9.res_p_ref, spec)
    assert np.array_equal(y, extract_outputs(ieee9, sol, spec))


# --- parsing ---------------------------------------------------------------
def test_parse_matpower_ieee9():
    case = parse_matpower(CASE9_M)
    assert (len(case.buses), len(case.generators), len(case.loads)) == (9, 3, 3)
    assert case.lines[0].b == pytest.approx(-1 / 0.0576)


def test_native_round_trip(ieee39):
    text = dump_case(ieee39)
    again = parse_case(text)
    assert dump_case(again) == text
    assert again.fingerprint == ieee39.fingerprint


def test_duplicate_bus_rejected():
    with pytest.raises(ValidationError):
        GridCase([Bus(1, "slack", v_set=1.0), Bus(1, "pq")], [Line(1, 1, 0, -1)],
                 [Generator(1, 0, 1, -1, 1)])


@pytest.mark.parametrize("bad", [
    lambda c: replace(c.buses[0], v_min=1.2, v_max=1.0),
    lambda c: replace(c.generators[0], p_min=2.0, p_max=1.0),
    lambda c: replace(c.lines[0], g=0.0, b=0.0),
])
def test_invariants_enforced(bad):
    case = two_bus()
    obj = bad(case)
    with pytest.raises(ValidationError):
        obj.validate()


def test_parse_errors_report_location():
    with pytest.raises(ParseError) as exc:
        parse_case("{\"buses\": [", "native")
    assert exc.value.line == 1
    text = CASE9_M.replace("mpc.branch = [\n", "mpc.branch = [\n\t1\t4\t0;\n", 1)
    with pytest.raises(ParseError) as exc:
        parse_matpower(text)
    assert exc.value.field == "branch" and exc.value.line is not None


def test_phase_shifter_rejected():
    lines = CASE9_M.splitlines()
    i = next(k for k, l in enumerate(lines) if l.strip().startswith("mpc.branch"))
    row = lines[i + 1].split()
    row[9] = "5"
    lines[i + 1] = "\t" + "\t".join(row)
    with pytest.raises(ParseError):
        parse_matpower("\n".join(lines))


def test_bundled_case_files_exist():
    for name in ("ieee9", "ieee39"):
        assert Path(DATA_DIR / f"{name}.json").exists()
