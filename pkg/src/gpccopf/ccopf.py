"""Chance-constrained OPF on a GP surrogate of the power-flow map.

The nonlinear program is solved in the reduced space of set-points ``u``
and participation factors ``alpha``; output moments are evaluated by the
configured propagation method at every iterate.
"""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, nnls
from scipy.special import ndtri

from .errors import DomainError, InfeasibleSubproblem, MaxIterations, ValidationError
from .gp.multi import MultiGpModel
from .grid.case import GridCase
from .grid.powerflow import OutputSpec
from .propagation import METHODS, assemble_input_cov, propagate, ta1_jacobians

FEAS_TOL = 1e-6


def quantile(p: float) -> float:
    """Standard normal inverse CDF."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability {p} outside (0, 1)")
    return float(ndtri(p))


def expected_cost(u, alpha, sigma_w, c2, c1, c0) -> float:
    """Expected quadratic generation cost under affine recourse."""
    u = np.asarray(u, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    total_var = float(np.sum(np.asarray(sigma_w, dtype=float) ** 2))
    return float(np.sum(np.asarray(c2) * (u**2 + total_var * alpha**2) + np.asarray(c1) * u
                        + np.asarray(c0)))


@dataclass
class CcOpfProblem:
    """Data of one chance-constrained dispatch problem.

    Attributes
    ----------
    model : MultiGpModel
        Surrogate with inputs ``[u, p_loads, p_renewables]``.
    u_min, u_max : ndarray
        Controllable generation limits.
    y_min, y_max : ndarray
        Output limits; infinite entries are not constrained.
    c2, c1, c0 : ndarray
        Cost coefficients per controllable unit.
    eps_u, eps_y : float
        Admissible violation probabilities.
    load_p, res_p : ndarray
        Forecast injections.
    sigma_w : ndarray
        Fluctuation standard deviations, loads first.
    signs : ndarray
        ``+1`` for loads, ``-1`` for renewables (sign in the imbalance).
    method : str
        ``"ta1"``, ``"ta2"`` or ``"em"``.
    balance_factor : float
        Multiplier on the forecast load in the balance constraint.
    """

    model: MultiGpModel
    u_min: np.ndarray
    u_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray
    c2: np.ndarray
    c1: np.ndarray
    c0: np.ndarray
    eps_u: float
    eps_y: float
    load_p: np.ndarray
    res_p: np.ndarray
    sigma_w: np.ndarray
    signs: np.ndarray
    method: str = "ta1"
    balance_factor: float = 1.0
    u_ref: np.ndarray | None = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("u_min", "u_max", "y_min", "y_max", "c2", "c1", "c0", "load_p", "res_p",
                     "sigma_w", "signs"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.validate()
        self._hull_check()

    @property
    def n_u(self):
        return self.u_min.size

    def validate(self):
        for name in ("eps_u", "eps_y"):
            eps = getattr(self, name)
            if not 0.0 < eps < 0.5:
                raise ValidationError(f"{name} must lie in (0, 0.5)")
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        n_x = self.n_u + self.load_p.size + self.res_p.size
        if self.model.n_inputs != n_x:
            raise ValidationError(f"model has {self.model.n_inputs} inputs, problem needs {n_x}")
        if self.y_min.size != self.model.n_outputs or self.y_max.size != self.model.n_outputs:
            raise ValidationError("output limits do not match the model")
        if self.sigma_w.size != self.load_p.size + self.res_p.size:
            raise ValidationError("sigma_w must cover every uncertain injection")
        if np.any(self.u_min > self.u_max) or np.any(self.y_min > self.y_max):
            raise ValidationError("limit pair with min > max")

    def _hull_check(self):
        X = self.model.X
        w = np.concatenate([self.load_p, self.res_p])
        lo, hi = X[:, self.n_u:].min(axis=0), X[:, self.n_u:].max(axis=0)
        outside = np.flatnonzero((w < lo) | (w > hi))
        if outside.size:
            msg = f"forecast injections outside the training range: columns {outside.tolist()}"
            self.warnings.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=3)

    @classmethod
    def from_case(cls, case: GridCase, model: MultiGpModel, spec: OutputSpec | None = None,
                  eps_u: float = 0.001, eps_y: float = 0.025, method: str = "ta1",
                  sigma_w=None, balance_losses: bool = True, load_p=None, res_p=None):
        """Problem with limits, costs and forecasts taken from ``case``."""
        spec = OutputSpec.default(case) if spec is None else spec
        gens = [case.generators[k] for k in case.controllable]
        y_min, y_max = spec.limits(case)
        return cls(model=model,
                   u_min=[g.p_min for g in gens], u_max=[g.p_max for g in gens],
                   y_min=y_min, y_max=y_max,
                   c2=[g.c2 for g in gens], c1=[g.c1 for g in gens], c0=[g.c0 for g in gens],
                   eps_u=eps_u, eps_y=eps_y,
                   load_p=case.load_p_ref if load_p is None else load_p,
                   res_p=case.res_p_ref if res_p is None else res_p,
                   sigma_w=case.injection_sigma if sigma_w is None else sigma_w,
                   signs=np.concatenate([np.ones(len(case.loads)), -np.ones(len(case.renewables))]),
                   method=method, balance_factor=case.loss_factor if balance_losses else 1.0,
                   u_ref=case.gen_p_ref[case.controllable])

    @property
    def total_var(self):
        return float(np.sum(self.sigma_w**2))

    @property
    def balance_target(self):
        return self.balance_factor * float(self.load_p.sum()) - float(self.res_p.sum())

    def input_mean(self, u):
        return np.concatenate([np.asarray(u, dtype=float), self.load_p, self.res_p])

    def cost(self, u, alpha):
        return expected_cost(u, alpha, self.sigma_w, self.c2, self.c1, self.c0)

    def to_dict(self):
        return {"u_min": self.u_min.tolist(), "u_max": self.u_max.tolist(),
                "y_min": _list(self.y_min), "y_max": _list(self.y_max),
                "c2": self.c2.tolist(), "c1": self.c1.tolist(), "c0": self.c0.tolist(),
                "eps_u": self.eps_u, "eps_y": self.eps_y, "load_p": self.load_p.tolist(),
                "res_p": self.res_p.tolist(), "sigma_w": self.sigma_w.tolist(),
                "signs": self.signs.tolist(), "method": self.method,
                "balance_factor": self.balance_factor,
                "model_fingerprint": self.model.data_fingerprint}


def _list(a):
    return [x if np.isfinite(x) else ("inf" if x > 0 else "-inf") for x in np.asarray(a).tolist()]


@dataclass
class ConstraintValues:
    balance: float
    mu_y: np.ndarray
    sigma_y: np.ndarray
    lambda_y: np.ndarray
    lambda_u: np.ndarray
    y_upper: np.ndarray
    y_lower: np.ndarray
    u_upper: np.ndarray
    u_lower: np.ndarray
    fallback: np.ndarray

    def inequalities(self):
        g = np.concatenate([self.y_upper, self.y_lower, self.u_upper, self.u_lower])
        return g[np.isfinite(g)]

    def max_violation(self, alpha=None):
        g = self.inequalities()
        v = max(0.0, -float(g.min())) if g.size else 0.0
        v = max(v, abs(self.balance))
        if alpha is not None:
            v = max(v, abs(float(np.sum(alpha)) - 1.0), max(0.0, -float(np.min(alpha))))
        return v


def evaluate_constraints(problem: CcOpfProblem, u, alpha) -> ConstraintValues:
    """Balance residual, propagated output moments and all margin slacks."""
    u = np.asarray(u, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    cov = assemble_input_cov(alpha, problem.sigma_w, problem.signs, check=False)
    out = propagate(problem.model, problem.input_mean(u), cov, problem.method)
    sigma = np.sqrt(out.var)
    lam_y = quantile(1.0 - problem.eps_y) * sigma
    lam_u = quantile(1.0 - problem.eps_u) * alpha * np.sqrt(problem.total_var)
    return ConstraintValues(
        balance=float(u.sum() - problem.balance_target), mu_y=out.mean, sigma_y=sigma,
        lambda_y=lam_y, lambda_u=lam_u,
        y_upper=problem.y_max - lam_y - out.mean, y_lower=out.mean - problem.y_min - lam_y,
        u_upper=problem.u_max - lam_u - u, u_lower=u - problem.u_min - lam_u,
        fallback=out.fallback)


@dataclass
class CcOpfSolution:
    u: np.ndarray
    alpha: np.ndarray
    mu_y: np.ndarray
    sigma_y: np.ndarray
    lambda_y: np.ndarray
    lambda_u: np.ndarray
    cost: float
    iterations: int
    status: str
    message: str
    max_violation: float
    kkt: dict
    binding: list
    log: list = field(default_factory=list)
    method: str = "ta1"

    @property
    def converged(self):
        return self.status == "converged"

    def raise_for_status(self):
        if self.status == "max_iter":
            raise MaxIterations(self.message)
        if self.status == "infeasible":
            raise InfeasibleSubproblem(self.message, self.binding)

    def to_dict(self):
        return {"u": self.u.tolist(), "alpha": self.alpha.tolist(), "mu_y": self.mu_y.tolist(),
                "sigma_y": self.sigma_y.tolist(), "lambda_y": self.lambda_y.tolist(),
                "lambda_u": self.lambda_u.tolist(), "cost": self.cost,
                "iterations": self.iterations, "status": self.status, "message": self.message,
                "max_violation": self.max_violation, "kkt": self.kkt, "binding": self.binding,
                "method": self.method}

    def to_text(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text):
        d = json.loads(text)
        arr = {k: np.array(d[k], dtype=float) for k in
               ("u", "alpha", "mu_y", "sigma_y", "lambda_y", "lambda_u")}
        return cls(cost=d["cost"], iterations=d["iterations"], status=d["status"],
                   message=d["message"], max_violation=d["max_violation"], kkt=d["kkt"],
                   binding=d["binding"], method=d.get("method", "ta1"), **arr)

    def log_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "cost", "max_violation", "step_norm"])
        for row in self.log:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


class _Moments:
    """Caches moment evaluations and their derivatives by iterate."""

    def __init__(self, problem: CcOpfProblem, fd_step: float):
        self.p = problem
        self.h = fd_step
        self.cache = {}
        self.r_y = quantile(1.0 - problem.eps_y)
        self.r_u = quantile(1.0 - problem.eps_u)
        self.hi = np.isfinite(problem.y_max)
        self.lo = np.isfinite(problem.y_min)

    def values(self, z):
        key = ("v", z.tobytes())
        if key not in self.cache:
            n = self.p.n_u
            cov = assemble_input_cov(z[n:], self.p.sigma_w, self.p.signs, check=False)
            out = propagate(self.p.model, self.p.input_mean(z[:n]), cov, self.p.method)
            self.cache[key] = (out.mean, np.sqrt(np.maximum(out.var, 1e-30)))
        return self.cache[key]

    def jacobian(self, z):
        key = ("j", z.tobytes())
        if key in self.cache:
            return self.cache[key]
        n = self.p.n_u
        if self.p.method == "ta1":
            p = self.p
            alpha = z[n:]
            T = p.total_var
            sw = p.signs * p.sigma_w**2

            def cov_terms(g):
                gu, gw = g[:n], g[n:]
                a = gu @ alpha
                b = gw @ sw
                quad = T * a * a + 2 * a * b + np.sum(p.sigma_w**2 * gw * gw)
                cov_g = np.concatenate([alpha * (T * a + b), sw * a + p.sigma_w**2 * gw])
                return quad, 2.0 * gu * (T * a + b), cov_g

            mean, var, dm, dv, da = ta1_jacobians(p.model, p.input_mean(z[:n]), cov_terms)
            sigma = np.sqrt(np.maximum(var, 1e-30))
            Jm = np.hstack([dm[:, :n], np.zeros((mean.size, n))])
            Js = np.hstack([dv[:, :n], da]) / (2.0 * sigma[:, None])
        else:
            cols_m, cols_s = [], []
            for j in range(z.size):
                zp = z.copy()
                zm = z.copy()
                zp[j] += self.h
                zm[j] -= self.h
                mp, sp = self.values(zp)
                mm, sm = self.values(zm)
                cols_m.append((mp - mm) / (2 * self.h))
                cols_s.append((sp - sm) / (2 * self.h))
            Jm = np.array(cols_m).T
            Js = np.array(cols_s).T
        self.cache[key] = (Jm, Js)
        if len(self.cache) > 2000:
            self.cache.clear()
            self.cache[key] = (Jm, Js)
        return Jm, Js

    # inequality vector g(z) >= 0 and its Jacobian
    def ineq(self, z):
        n = self.p.n_u
        mu, sigma = self.values(z)
        lam_u = self.r_u * z[n:] * np.sqrt(self.p.total_var)
        return np.concatenate([(self.p.y_max - self.r_y * sigma - mu)[self.hi],
                               (mu - self.r_y * sigma - self.p.y_min)[self.lo],
                               self.p.u_max - lam_u - z[:n], z[:n] - self.p.u_min - lam_u])

    def ineq_jac(self, z):
        n = self.p.n_u
        Jm, Js = self.jacobian(z)
        c = self.r_u * np.sqrt(self.p.total_var)
        eye = np.eye(n)
        Ju_hi = np.hstack([-eye, -c * eye])
        Ju_lo = np.hstack([eye, -c * eye])
        return np.vstack([(-Jm - self.r_y * Js)[self.hi], (Jm - self.r_y * Js)[self.lo],
                          Ju_hi, Ju_lo])

    def ineq_labels(self):
        labels = self.p.model.y_labels or [f"y{a}" for a in range(self.p.model.n_outputs)]
        n = self.p.n_u
        return ([f"{l}:upper" for l, h in zip(labels, self.hi) if h]
                + [f"{l}:lower" for l, lo in zip(labels, self.lo) if lo]
                + [f"u{k}:upper" for k in range(n)] + [f"u{k}:lower" for k in range(n)])


def initial_point(problem: CcOpfProblem):
    ref = problem.u_ref if problem.u_ref is not None else 0.5 * (problem.u_min + problem.u_max)
    ref = np.asarray(ref, dtype=float)
    u0 = ref * problem.balance_target / ref.sum() if ref.sum() else np.full(
        problem.n_u, problem.balance_target / problem.n_u)
    return np.clip(u0, problem.u_min, problem.u_max), np.full(problem.n_u, 1.0 / problem.n_u)


def solve(problem: CcOpfProblem, tol: float = 1e-9, max_iter: int = 200, init=None,
          fd_step: float = 1e-6) -> CcOpfSolution:
    """Minimize expected cost subject to balance, simplex and margin constraints.

    Parameters
    ----------
    problem : CcOpfProblem
    tol : float
        Optimality tolerance passed to the SQP iteration.
    max_iter : int
        Major-iteration cap.
    init : (u, alpha), optional
        Starting point; default is the reference dispatch scaled to balance
        with uniform participation.
    fd_step : float
        Central-difference step for the moment Jacobian (``ta2``/``em``).

    Returns
    -------
    CcOpfSolution
        ``status`` is ``"converged"``, ``"max_iter"`` or ``"infeasible"``;
        call :meth:`CcOpfSolution.raise_for_status` to turn failures into
        exceptions.
    """
    n = problem.n_u
    u0, a0 = initial_point(problem) if init is None else (np.asarray(init[0], float),
                                                          np.asarray(init[1], float))
    z0 = np.concatenate([u0, a0])
    mom = _Moments(problem, fd_step)
    scale = max(abs(problem.cost(u0, a0)), 1.0)
    T = problem.total_var
    c2, c1 = problem.c2, problem.c1

    def f(z):
        return problem.cost(z[:n], z[n:]) / scale

    def df(z):
        return np.concatenate([2 * c2 * z[:n] + c1, 2 * c2 * T * z[n:]]) / scale

    A_eq = np.vstack([np.concatenate([np.ones(n), np.zeros(n)]),
                      np.concatenate([np.zeros(n), np.ones(n)])])
    b_eq = np.array([problem.balance_target, 1.0])
    cons = [{"type": "eq", "fun": lambda z: A_eq @ z - b_eq, "jac": lambda z: A_eq},
            {"type": "ineq", "fun": mom.ineq, "jac": mom.ineq_jac}]
    bounds = [(lo, hi) for lo, hi in zip(problem.u_min, problem.u_max)] + [(0.0, 1.0)] * n

    log = []
    prev = [z0.copy()]

    def callback(zk):
        g = mom.ineq(zk)
        viol = max(float(np.max(np.abs(A_eq @ zk - b_eq))), max(0.0, -float(g.min())))
        log.append((len(log) + 1, problem.cost(zk[:n], zk[n:]), viol,
                    float(np.linalg.norm(zk - prev[0]))))
        prev[0] = zk.copy()

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(f, z0, jac=df, method="SLSQP", bounds=bounds, constraints=cons,
                       callback=callback, options={"ftol": tol, "maxiter": max_iter})
    z = np.clip(res.x, [b[0] for b in bounds], [b[1] for b in bounds])
    u, alpha = z[:n], z[n:]
    ev = evaluate_constraints(problem, u, alpha)
    viol = ev.max_violation(alpha)
    g = mom.ineq(z)
    labels = mom.ineq_labels()
    binding = [labels[i] for i in np.flatnonzero(g < 1e-6)]
    kkt = _kkt(z, df(z) * scale, A_eq, mom, g, bounds)
    if viol > FEAS_TOL:
        status = "infeasible"
        message = f"margins cannot be met (max violation {viol:.3g}): {res.message}"
    elif res.status == 9:
        status = "max_iter"
        message = str(res.message)
    elif res.success or (res.status == 8 and kkt["stationarity"] < 1e-4 * scale):
        status = "converged"
        message = str(res.message)
    else:
        status = "failed"
        message = str(res.message)
    return CcOpfSolution(u=u, alpha=alpha, mu_y=ev.mu_y, sigma_y=ev.sigma_y, lambda_y=ev.lambda_y,
                         lambda_u=ev.lambda_u, cost=problem.cost(u, alpha), iterations=int(res.nit),
                         status=status, message=message, max_violation=viol, kkt=kkt,
                         binding=binding, log=log, method=problem.method)


def _kkt(z, grad, A_eq, mom, g, bounds, active_tol=1e-6):
    """First-order residuals with multipliers from a sign-constrained least squares fit."""
    J = mom.ineq_jac(z)
    act = np.flatnonzero(g < active_tol)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    at_lo = np.flatnonzero(z - lo < active_tol)
    at_hi = np.flatnonzero(hi - z < active_tol)
    n = z.size
    E = np.eye(n)
    # grad = A_eq^T nu + J_act^T mu + E_lo^T mu_lo - E_hi^T mu_hi, mu >= 0
    ineq_cols = np.hstack([J[act].T, E[:, at_lo], -E[:, at_hi]])
    # eliminate the free equality multipliers by projecting onto null(A_eq^T)
    Qm, _ = np.linalg.qr(A_eq.T, mode="complete")
    P = Qm[:, A_eq.shape[0]:].T
    if ineq_cols.shape[1]:
        mu, rnorm = nnls(P @ ineq_cols, P @ grad)
    else:
        mu, rnorm = np.zeros(0), float(np.linalg.norm(P @ grad))
    n_act = act.size
    comp = float(np.max(np.abs(mu[:n_act] * g[act]))) if n_act else 0.0
    return {"stationarity": float(rnorm), "complementarity": comp,
            "primal": float(max(0.0, -g.min())) if g.size else 0.0,
            "active": int(n_act + at_lo.size + at_hi.size)}


__all__ = ["CcOpfProblem", "CcOpfSolution", "ConstraintValues", "quantile", "expected_cost",
           "evaluate_constraints", "solve", "initial_point", "FEAS_TOL"]
