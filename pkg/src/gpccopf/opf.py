"""Deterministic AC optimal power flow on the exact power-flow model.

The decision vector is the active dispatch of every controllable non-slack
generator, optionally extended by the voltage set-points of all
generator buses. The slack output and all monitored quantities are
implicit functions evaluated by a power-flow solve.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from types import SimpleNamespace

import numpy as np
from scipy.optimize import minimize

from .errors import GpCcOpfError, NonConvergence
from .grid.case import GridCase
from .grid.powerflow import Injections, OutputSpec, extract_outputs, solve_ac_pf


@dataclass
class AcOpfResult:
    gen_p: np.ndarray
    v_set: np.ndarray
    cost: float
    outputs: np.ndarray
    converged: bool
    iterations: int
    message: str
    max_violation: float


def generation_cost(case: GridCase, gen_p) -> float:
    gen_p = np.asarray(gen_p, dtype=float)
    c2 = np.array([g.c2 for g in case.generators])
    c1 = np.array([g.c1 for g in case.generators])
    c0 = np.array([g.c0 for g in case.generators])
    return float(np.sum(c2 * gen_p**2 + c1 * gen_p + c0))


class _PfEvaluator:
    """Caches power-flow solves keyed by the decision vector."""

    def __init__(self, case, load_p, res_p, spec, free_gens, voltage_buses, warm):
        self.case = case
        self.load_p = load_p
        self.res_p = res_p
        self.spec = spec
        self.free = free_gens
        self.vbus = voltage_buses
        self.warm = warm
        self.cache = {}
        lo, hi = spec.limits(case)
        sg = case.slack_generators[0]
        self.lo = np.concatenate([lo, [case.generators[sg].p_min]])
        self.hi = np.concatenate([hi, [case.generators[sg].p_max]])
        self.finite_lo = np.isfinite(self.lo)
        self.finite_hi = np.isfinite(self.hi)

    def split(self, x):
        gen_p = self.case.gen_p_ref.copy()
        gen_p[self.free] = x[:len(self.free)]
        v_set = self.case.v_set.copy()
        if len(self.vbus):
            v_set[self.vbus] = x[len(self.free):]
        return gen_p, v_set

    def __call__(self, x):
        key = x.tobytes()
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        gen_p, v_set = self.split(x)
        inj = Injections.from_dispatch(self.case, gen_p, self.load_p, self.res_p, v_set=v_set)
        try:
            sol = solve_ac_pf(self.case, inj, warm_start=self.warm)
        except GpCcOpfError:
            try:
                sol = solve_ac_pf(self.case, inj)
            except GpCcOpfError:
                sol = None
        if sol is None:
            out = (np.inf, None, None)
        else:
            y = np.concatenate([extract_outputs(self.case, sol, self.spec), [sol.slack_p]])
            out = (generation_cost(self.case, sol.gen_p), y, sol)
        if len(self.cache) > 4096:
            self.cache.clear()
        self.cache[key] = out
        return out

    def constraints(self, x):
        _, y, _ = self(x)
        if y is None:
            return -np.ones(int(self.finite_lo.sum() + self.finite_hi.sum()))
        return np.concatenate([y[self.finite_hi] * -1 + self.hi[self.finite_hi],
                               y[self.finite_lo] - self.lo[self.finite_lo]])

    def cost(self, x):
        c, _, _ = self(x)
        return c if np.isfinite(c) else 1e12


def _fd_jacobian(fun, x, step):
    f0 = np.atleast_1d(fun(x))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += step
        xm[j] -= step
        J[:, j] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))) / (2 * step)
    return J


def ac_opf(case: GridCase, load_p=None, res_p=None, spec: OutputSpec | None = None,
           optimize_voltage: bool = False, x0=None, tol: float = 1e-9, max_iter: int = 200,
           fd_step: float = 1e-6) -> AcOpfResult:
    """Minimum-cost dispatch for fixed injections.

    Parameters
    ----------
    case : GridCase
    load_p, res_p : array_like, optional
        Active powers of loads and renewables; reference values by default.
    spec : OutputSpec, optional
        Monitored quantities kept within their limits. Defaults to
        :meth:`OutputSpec.default`.
    optimize_voltage : bool
        Also optimize generator-bus voltage set-points within the bus band.
    x0 : array_like, optional
        Initial non-slack dispatch.

    Raises
    ------
    NonConvergence
        The power flow fails at the initial point.
    """
    spec = OutputSpec.default(case) if spec is None else spec
    load_p = case.load_p_ref if load_p is None else np.asarray(load_p, dtype=float)
    res_p = case.res_p_ref if res_p is None else np.asarray(res_p, dtype=float)
    slack_gens = set(case.slack_generators[:1].tolist())
    free = np.array([k for k in case.controllable if k not in slack_gens], dtype=np.intp)
    vbus = np.array(sorted(set(case.gen_bus.tolist())), dtype=np.intp) if optimize_voltage else \
        np.array([], dtype=np.intp)
    gens = case.generators
    lb = [gens[k].p_min for k in free] + [case.buses[i].v_min for i in vbus]
    ub = [gens[k].p_max for k in free] + [case.buses[i].v_max for i in vbus]
    if x0 is None:
        x0 = np.concatenate([case.gen_p_ref[free], case.v_set[vbus]])
    x0 = np.clip(np.asarray(x0, dtype=float), lb, ub)
    inj0 = Injections.from_dispatch(case, case.gen_p_ref, load_p, res_p)
    try:
        warm = solve_ac_pf(case, inj0)
        warm = (warm.v.copy(), warm.theta.copy())
    except GpCcOpfError as exc:
        raise NonConvergence(f"power flow fails at the initial point: {exc}") from exc
    ev = _PfEvaluator(case, load_p, res_p, spec, free, vbus, warm)
    if ev(x0)[1] is None:
        raise NonConvergence("power flow fails at the initial point")

    if x0.size == 0:
        # nothing to choose: the slack unit covers the load alone
        res = SimpleNamespace(x=x0, success=True, status=0, nit=0, message="no free variables")
    else:
        res = minimize(ev.cost, x0, jac=lambda x: _fd_jacobian(ev.cost, x, fd_step)[0],
                       bounds=list(zip(lb, ub)), method="SLSQP",
                       constraints=[{"type": "ineq", "fun": ev.constraints,
                                     "jac": lambda x: _fd_jacobian(ev.constraints, x, fd_step)}],
                       options={"ftol": tol, "maxiter": max_iter})
    cost, y, sol = ev(res.x)
    if sol is None:
        raise NonConvergence("power flow fails at the optimizer's final point")
    g = ev.constraints(res.x)
    viol = float(max(0.0, -g.min())) if g.size else 0.0
    gen_p, v_set = ev.split(res.x)
    gen_p[case.slack_generators[0]] = sol.slack_p
    # status 8 is a failed line search, typical at an optimum reached with
    # finite-difference gradients; accept it when the point is feasible
    ok = (res.success or res.status == 8) and viol < 1e-6
    return AcOpfResult(gen_p=gen_p, v_set=v_set, cost=cost, outputs=y[:-1], converged=bool(ok),
                       iterations=int(res.nit), message=str(res.message), max_violation=viol)


def tightened_limits(case: GridCase, voltage_margin: float = 0.0,
                     fraction: float = 0.0) -> GridCase:
    """Copy of ``case`` with shrunk operating limits.

    PQ-bus voltage bands lose ``voltage_margin`` p.u. on each side;
    reactive bands lose ``fraction`` of their width on each side and line
    ratings are scaled by ``1 - fraction``.
    """
    buses = tuple(replace(b, v_min=b.v_min + voltage_margin, v_max=b.v_max - voltage_margin)
                  if b.kind == "pq" else b for b in case.buses)
    gens = []
    for g in case.generators:
        cut = fraction * (g.q_max - g.q_min)
        gens.append(replace(g, q_min=g.q_min + cut, q_max=g.q_max - cut))
    lines = tuple(replace(l, s_max=l.s_max * (1.0 - fraction)) for l in case.lines)
    return replace(case, buses=buses, generators=tuple(gens), lines=lines)


def reference_point(case: GridCase, spec: OutputSpec | None = None,
                    voltage_margin: float = 0.02, fraction: float = 0.05) -> GridCase:
    """Replace reference dispatch and generator voltages by a voltage-optimized OPF.

    The OPF runs on limits shrunk by :func:`tightened_limits`, so the
    reference keeps some headroom for fluctuations around it. The loss
    factor is re-derived from the new reference dispatch.
    """
    res = ac_opf(tightened_limits(case, voltage_margin, fraction), spec=spec,
                 optimize_voltage=True)
    if not res.converged:
        raise NonConvergence(f"reference OPF failed: {res.message}")
    gens = [replace(g, p_ref=float(np.clip(p, g.p_min, g.p_max)))
            for g, p in zip(case.generators, res.gen_p)]
    buses = [replace(b, v_set=float(res.v_set[i])) if b.kind != "pq" else b
             for i, b in enumerate(case.buses)]
    return replace(case, generators=tuple(gens), buses=tuple(buses), loss_factor=None)


__all__ = ["AcOpfResult", "ac_opf", "generation_cost", "reference_point", "tightened_limits"]
