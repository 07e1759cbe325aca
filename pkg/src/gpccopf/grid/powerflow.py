"""AC power flow and output extraction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..backend import core
from ..errors import NonConvergence, SingularJacobian, SpecMismatch
from .case import GridCase

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 30


@dataclass(frozen=True)
class Injections:
    """Per-bus specified active/reactive injections and voltage set-points."""

    p: np.ndarray
    q: np.ndarray
    v_set: np.ndarray
    gen_p: np.ndarray
    load_p: np.ndarray
    res_p: np.ndarray

    @classmethod
    def from_dispatch(cls, case: GridCase, gen_p=None, load_p=None, res_p=None, v_set=None):
        """Build bus injections from element powers.

        ``gen_p`` covers all generators (the slack entry is ignored by the
        solver); reactive powers of loads and renewables follow their
        constant power ratio.
        """
        gen_p = case.gen_p_ref if gen_p is None else np.asarray(gen_p, dtype=float)
        load_p = case.load_p_ref if load_p is None else np.asarray(load_p, dtype=float)
        res_p = case.res_p_ref if res_p is None else np.asarray(res_p, dtype=float)
        n = case.n_bus
        p = np.zeros(n)
        q = np.zeros(n)
        np.add.at(p, case.gen_bus, gen_p)
        if len(case.loads):
            np.add.at(p, case.load_bus, -load_p)
            np.add.at(q, case.load_bus, -case.load_gamma * load_p)
        if len(case.renewables):
            np.add.at(p, case.res_bus, res_p)
            np.add.at(q, case.res_bus, case.res_gamma * res_p)
        v = case.v_set if v_set is None else np.asarray(v_set, dtype=float)
        return cls(p=p, q=q, v_set=v, gen_p=gen_p, load_p=load_p, res_p=res_p)


@dataclass(frozen=True)
class PfSolution:
    v: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    q: np.ndarray
    p_from: np.ndarray
    q_from: np.ndarray
    p_to: np.ndarray
    q_to: np.ndarray
    s: np.ndarray
    gen_p: np.ndarray
    gen_q: np.ndarray
    converged: bool
    iterations: int
    residual: float
    slack_p: float = 0.0

    @property
    def losses(self):
        return float(np.sum(self.p_from + self.p_to))


def line_flows(case: GridCase, v, theta):
    """Directed branch flows.

    Returns
    -------
    p_from, q_from, p_to, q_to, s : ndarray
        Power leaving each end and the larger of the two apparent flows.
    """
    V = np.asarray(v) * np.exp(1j * np.asarray(theta))
    yff, yft, ytf, ytt = case.branch_matrices
    f, t = case.line_ends
    s_from = V[f] * np.conj(yff * V[f] + yft * V[t])
    s_to = V[t] * np.conj(ytf * V[f] + ytt * V[t])
    s = np.maximum(np.abs(s_from), np.abs(s_to))
    return s_from.real, s_from.imag, s_to.real, s_to.imag, s


def bus_power(case: GridCase, v, theta):
    return core.bus_power(case.g_matrix, case.b_matrix, np.asarray(v, float), np.asarray(theta, float))


def solve_ac_pf(case: GridCase, injections: Injections, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER, warm_start=None) -> PfSolution:
    """Solve the AC power-flow equations by Newton-Raphson.

    Parameters
    ----------
    case : GridCase
    injections : Injections
        Specified powers for PV/PQ buses and voltage set-points.
    tol : float
        Cap on the largest active/reactive mismatch (p.u.).
    max_iter : int
        Newton iteration cap.
    warm_start : (v, theta), optional
        Initial magnitudes and angles. Default is a flat start with the
        voltage set-points applied.

    Raises
    ------
    NonConvergence
        Iteration cap reached; ``exc.solution`` holds the last iterate.
    SingularJacobian
        The Jacobian became singular.
    """
    n = case.n_bus
    if warm_start is None:
        v = np.ones(n)
        theta = np.zeros(n)
    else:
        v = np.array(warm_start[0], dtype=float)
        theta = np.array(warm_start[1], dtype=float)
    fixed_v = np.concatenate([[case.slack], case.pv])
    v[fixed_v] = injections.v_set[fixed_v]
    pvpq = np.sort(np.concatenate([case.pv, case.pq]))
    status, iters, err = core.newton_pf(case.g_matrix, case.b_matrix, v, theta, injections.p,
                                        injections.q, pvpq, case.pq, tol, max_iter)
    if status == core.SINGULAR:
        raise SingularJacobian(f"singular Jacobian after {iters} iterations")
    sol = _assemble(case, injections, v, theta, status == core.CONVERGED, iters, err)
    if not sol.converged:
        raise NonConvergence(f"power flow did not converge in {iters} iterations "
                             f"(mismatch {err:.3g})", solution=sol)
    return sol


def _assemble(case, inj, v, theta, converged, iters, err):
    P, Q = bus_power(case, v, theta)
    pf, qf, pt, qt, s = line_flows(case, v, theta)
    # element-level generator powers: the first generator at a bus takes the
    # active residual at the slack; reactive output is split evenly per bus
    gen_p = np.array(inj.gen_p, dtype=float, copy=True)
    other = P - inj.p  # unscheduled injection
    slack_gens = case.slack_generators
    gen_p[slack_gens[0]] += other[case.slack]
    q_demand = Q - inj.q  # what generators at each bus must supply
    counts = np.bincount(case.gen_bus, minlength=case.n_bus)
    gen_q = q_demand[case.gen_bus] / counts[case.gen_bus]
    return PfSolution(v=v, theta=theta, p=P, q=Q, p_from=pf, q_from=qf, p_to=pt, q_to=qt, s=s,
                      gen_p=gen_p, gen_q=gen_q, converged=bool(converged), iterations=int(iters),
                      residual=float(err), slack_p=float(gen_p[slack_gens[0]]))


@dataclass(frozen=True)
class OutputSpec:
    """Selection of monitored quantities, in output order.

    Attributes
    ----------
    voltage_buses : tuple of int
        Bus ids whose magnitude is monitored.
    reactive_gens : tuple of int
        Generator positions whose reactive output is monitored.
    flow_lines : tuple of int
        Line positions whose apparent flow is monitored.
    """

    voltage_buses: tuple = ()
    reactive_gens: tuple = ()
    flow_lines: tuple = ()

    @classmethod
    def default(cls, case: GridCase):
        """PQ-bus voltages, all generator reactive powers, monitored lines."""
        return cls(voltage_buses=tuple(case.buses[i].id for i in case.pq),
                   reactive_gens=tuple(range(len(case.generators))),
                   flow_lines=tuple(k for k, l in enumerate(case.lines) if l.monitored))

    def __post_init__(self):
        for name in ("voltage_buses", "reactive_gens", "flow_lines"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))

    def __len__(self):
        return len(self.voltage_buses) + len(self.reactive_gens) + len(self.flow_lines)

    def check(self, case: GridCase):
        missing = [b for b in self.voltage_buses if b not in case.bus_index]
        if missing:
            raise SpecMismatch(f"unknown buses {missing}")
        if any(not 0 <= k < len(case.generators) for k in self.reactive_gens):
            raise SpecMismatch("generator index out of range")
        if any(not 0 <= k < len(case.lines) for k in self.flow_lines):
            raise SpecMismatch("line index out of range")

    def labels(self, case: GridCase):
        out = [f"v:{b}" for b in self.voltage_buses]
        out += [f"q:g{k}@{case.generators[k].bus}" for k in self.reactive_gens]
        out += [f"s:{case.lines[k].from_bus}-{case.lines[k].to_bus}#{k}" for k in self.flow_lines]
        return out

    def limits(self, case: GridCase):
        """Lower and upper bounds of every output."""
        lo, hi = [], []
        for b in self.voltage_buses:
            bus = case.buses[case.bus_index[b]]
            lo.append(bus.v_min)
            hi.append(bus.v_max)
        for k in self.reactive_gens:
            lo.append(case.generators[k].q_min)
            hi.append(case.generators[k].q_max)
        for k in self.flow_lines:
            lo.append(-np.inf)
            hi.append(case.lines[k].s_max)
        return np.array(lo), np.array(hi)

    def to_dict(self):
        return {"voltage_buses": list(self.voltage_buses), "reactive_gens": list(self.reactive_gens),
                "flow_lines": list(self.flow_lines)}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def extract_outputs(case: GridCase, sol: PfSolution, spec: OutputSpec) -> np.ndarray:
    """Flat output vector ``[v, q, s]`` selected by ``spec``."""
    spec.check(case)
    idx = np.array([case.bus_index[b] for b in spec.voltage_buses], dtype=np.intp)
    return np.concatenate([sol.v[idx], sol.gen_q[list(spec.reactive_gens)],
                           sol.s[list(spec.flow_lines)]])


def evaluate_outputs(case: GridCase, gen_p, load_p, res_p, spec: OutputSpec, **options):
    """Run a power flow for the given element powers and return ``(y, solution)``."""
    inj = Injections.from_dispatch(case, gen_p, load_p, res_p)
    sol = solve_ac_pf(case, inj, **options)
    return extract_outputs(case, sol, spec), sol


__all__ = ["Injections", "PfSolution", "OutputSpec", "solve_ac_pf", "line_flows", "bus_power",
           "extract_outputs", "evaluate_outputs", "DEFAULT_TOL", "DEFAULT_MAX_ITER"]
