"""Model-based baselines and Monte-Carlo validation on the exact power flow.

Baselines
---------
* base case: deterministic AC-OPF at the forecast, validated with equal
  participation factors;
* full recourse: a fresh AC-OPF for every uncertainty realization;
* scenario CC-OPF: one dispatch ``(u, alpha)`` that keeps every sampled
  scenario feasible under affine recourse.

All randomness comes from per-sample streams ``default_rng([seed, stream, i])``
so results do not depend on evaluation order.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .ccopf import expected_cost
from .errors import (GpCcOpfError, InfeasibleSubproblem, MaxIterations, NonConvergence,
                     TooManyFailures, ValidationError)
from .gp.multi import MultiGpModel, predict_multi
from .grid.case import GridCase
from .grid.powerflow import Injections, OutputSpec, extract_outputs, solve_ac_pf
from .opf import AcOpfResult, ac_opf, generation_cost
from .propagation import assemble_input_cov, propagate

MAX_DIVERGED = 0.05
QUANTILES = (0.0027, 0.9973)
VIOLATION_TOL = 1e-9


# --- scenarios ---------------------------------------------------------------
@dataclass(frozen=True)
class ScenarioSet:
    """Sampled zero-mean Gaussian fluctuations of the uncertain injections.

    Attributes
    ----------
    omega : ndarray, shape (S, n_d)
        Fluctuations, loads first then renewables.
    sigma : ndarray, shape (n_d,)
        Standard deviations used for sampling.
    signs : ndarray, shape (n_d,)
        ``+1`` for loads, ``-1`` for renewables.
    labels : tuple of str
        Injection each column belongs to.
    """

    omega: np.ndarray
    sigma: np.ndarray
    signs: np.ndarray
    labels: tuple = ()
    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        object.__setattr__(self, "omega", np.atleast_2d(np.asarray(self.omega, dtype=float)))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "signs", np.asarray(self.signs, dtype=float))
        if self.omega.shape[1] != self.sigma.size or self.signs.size != self.sigma.size:
            raise ValidationError("scenario columns do not match sigma/signs")

    def __len__(self):
        return self.omega.shape[0]

    @property
    def imbalance(self) -> np.ndarray:
        """Total power the recourse must cover, ``sum(omega_l) - sum(omega_rs)``."""
        return self.omega @ self.signs

    @classmethod
    def sample(cls, case: GridCase, n: int, seed: int = 0, stream: int = 0, sigma=None):
        if n < 1:
            raise ValidationError("need at least one scenario")
        sigma = case.injection_sigma if sigma is None else np.asarray(sigma, dtype=float)
        omega = np.array([np.random.default_rng([seed, stream, i]).standard_normal(sigma.size)
                          for i in range(n)]) * sigma
        return cls(omega, sigma, injection_signs(case), injection_labels(case), seed, stream)

    @classmethod
    def zeros(cls, case: GridCase, n: int = 1):
        sigma = case.injection_sigma
        return cls(np.zeros((n, sigma.size)), sigma, injection_signs(case),
                   injection_labels(case))

    def injections(self, case: GridCase, i: int):
        """Load and renewable active powers of scenario ``i``."""
        n_l = len(case.loads)
        return case.load_p_ref + self.omega[i, :n_l], case.res_p_ref + self.omega[i, n_l:]


def injection_signs(case: GridCase):
    return np.concatenate([np.ones(len(case.loads)), -np.ones(len(case.renewables))])


def injection_labels(case: GridCase):
    return tuple([f"pl:{l.bus}" for l in case.loads] + [f"prs:{r.bus}" for r in case.renewables])


def recourse_dispatch(case: GridCase, u, alpha, imbalance: float) -> np.ndarray:
    """Generator set-points after affine recourse ``u + alpha * imbalance``."""
    gen_p = case.gen_p_ref.copy()
    gen_p[case.controllable] = np.asarray(u, dtype=float) + np.asarray(alpha) * imbalance
    return gen_p


def constraint_labels(case: GridCase, spec: OutputSpec):
    return spec.labels(case) + [f"p:g{k}@{case.generators[k].bus}" for k in case.controllable]


def constraint_limits(case: GridCase, spec: OutputSpec):
    lo, hi = spec.limits(case)
    gens = [case.generators[k] for k in case.controllable]
    return (np.concatenate([lo, [g.p_min for g in gens]]),
            np.concatenate([hi, [g.p_max for g in gens]]))


def _solve_outputs(case, spec, gen_p, load_p, res_p, warm=None):
    """Outputs plus realized controllable generation, or ``None`` on PF failure."""
    inj = Injections.from_dispatch(case, gen_p, load_p, res_p)
    for start in ((warm, None) if warm is not None else (None,)):
        try:
            sol = solve_ac_pf(case, inj, warm_start=start)
        except GpCcOpfError:
            continue
        h = np.concatenate([extract_outputs(case, sol, spec), sol.gen_p[case.controllable]])
        return h, sol
    return None, None


def violation_rates(H, lo, hi, tol: float = VIOLATION_TOL):
    """Per-constraint and joint violation frequencies of sampled values.

    Rows that are entirely NaN (failed evaluations) count as violating
    every constraint.

    Returns
    -------
    lower, upper : ndarray
        Per-column frequency of ``H < lo`` and ``H > hi``.
    joint : float
        Frequency of rows violating any constraint.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    failed = np.all(np.isnan(H), axis=1)
    with np.errstate(invalid="ignore"):
        below = (H < lo - tol) | failed[:, None]
        above = (H > hi + tol) | failed[:, None]
    joint = float(np.mean(np.any(below | above, axis=1))) if len(H) else 0.0
    return below.mean(axis=0), above.mean(axis=0), joint


# --- baselines A and B -------------------------------------------------------
@dataclass
class BaseCaseResult:
    u: np.ndarray
    alpha: np.ndarray
    cost: float
    opf: AcOpfResult


def base_case(case: GridCase, spec: OutputSpec | None = None) -> BaseCaseResult:
    """AC-OPF at the forecast with equal participation factors for recourse.

    Raises
    ------
    NonConvergence
        The AC-OPF did not reach a feasible optimum.
    """
    res = ac_opf(case, spec=spec)
    if not res.converged:
        raise NonConvergence(f"base-case AC-OPF failed: {res.message}")
    n = case.n_u
    return BaseCaseResult(res.gen_p[case.controllable], np.full(n, 1.0 / n), res.cost, res)


@dataclass
class RecourseResult:
    costs: np.ndarray
    failures: int

    @property
    def mean_cost(self) -> float:
        ok = self.costs[np.isfinite(self.costs)]
        return float(ok.mean()) if ok.size else float("nan")


def full_recourse(case: GridCase, scenarios: ScenarioSet,
                  spec: OutputSpec | None = None) -> RecourseResult:
    """Independent AC-OPF per scenario; failed scenarios are counted, not fatal."""
    costs = np.full(len(scenarios), np.nan)
    failures = 0
    for i in range(len(scenarios)):
        load_p, res_p = scenarios.injections(case, i)
        try:
            res = ac_opf(case, load_p, res_p, spec=spec)
        except GpCcOpfError:
            failures += 1
            continue
        if res.converged:
            costs[i] = res.cost
        else:
            failures += 1
    return RecourseResult(costs, failures)


# --- scenario CC-OPF ---------------------------------------------------------
@dataclass(frozen=True)
class ScenarioOptions:
    """Settings of the successive-linearization solver.

    ``trust_radius`` bounds each step in the max-norm (p.u. for set-points,
    absolute for participation factors).
    """

    max_iter: int = 100
    trust_radius: float = 0.1
    min_radius: float = 1e-8
    step_tol: float = 1e-7
    feas_tol: float = 1e-6
    fd_step: float = 1e-6
    penalty: float = 1e3
    gamma: float = 1e-5


@dataclass
class ScenarioResult:
    u: np.ndarray
    alpha: np.ndarray
    cost: float
    iterations: int
    status: str
    message: str
    max_violation: float
    blocking: list = field(default_factory=list)
    log: list = field(default_factory=list)

    @property
    def converged(self):
        return self.status == "converged"

    def raise_for_status(self):
        if self.status == "max_iter":
            raise MaxIterations(self.message)
        if self.status == "infeasible":
            raise InfeasibleSubproblem(self.message, self.blocking)

    def to_dict(self):
        return {"u": self.u.tolist(), "alpha": self.alpha.tolist(), "cost": self.cost,
                "iterations": self.iterations, "status": self.status, "message": self.message,
                "max_violation": self.max_violation, "blocking": self.blocking}


class _ScenarioModel:
    """Per-scenario outputs and sensitivities for a dispatch ``z = [u, alpha]``."""

    def __init__(self, case, spec, scenarios, fd_step):
        self.case = case
        self.spec = spec
        self.sc = scenarios
        self.h = fd_step
        self.n = case.n_u
        slack = set(case.slack_generators[:1].tolist())
        # positions within u whose set-point reaches the power flow
        self.free = np.array([j for j, k in enumerate(case.controllable) if k not in slack],
                             dtype=np.intp)
        self.omega = scenarios.imbalance
        self.lo, self.hi = constraint_limits(case, spec)
        self.mask_lo = np.isfinite(self.lo)
        self.mask_hi = np.isfinite(self.hi)
        self.warm = [None] * len(scenarios)

    def outputs(self, z):
        """Stacked constraint slacks ``g >= 0`` (``None`` if any PF fails) and raw outputs."""
        n = self.n
        H = []
        for s in range(len(self.sc)):
            gen_p = recourse_dispatch(self.case, z[:n], z[n:], self.omega[s])
            load_p, res_p = self.sc.injections(self.case, s)
            h, sol = _solve_outputs(self.case, self.spec, gen_p, load_p, res_p, self.warm[s])
            if h is None:
                return None, None
            self.warm[s] = (sol.v, sol.theta)
            H.append(h)
        H = np.array(H)
        return self.slacks(H), H

    def slacks(self, H):
        return np.concatenate([(self.hi - H)[:, self.mask_hi].ravel(),
                               (H - self.lo)[:, self.mask_lo].ravel()])

    def jacobian(self, z, H):
        """Jacobian of the stacked slacks by central differences per scenario."""
        n = self.n
        rows_hi, rows_lo = [], []
        for s in range(len(self.sc)):
            load_p, res_p = self.sc.injections(self.case, s)
            base = recourse_dispatch(self.case, z[:n], z[n:], self.omega[s])
            dh = np.zeros((H.shape[1], n))
            for j in self.free:
                k = self.case.controllable[j]
                cols = []
                for sign in (1.0, -1.0):
                    gen_p = base.copy()
                    gen_p[k] += sign * self.h
                    h, _ = _solve_outputs(self.case, self.spec, gen_p, load_p, res_p,
                                          self.warm[s])
                    if h is None:
                        raise GpCcOpfError("power flow failed during sensitivity evaluation")
                    cols.append(h)
                dh[:, j] = (cols[0] - cols[1]) / (2 * self.h)
            # d h / d u_j = dh_j ; d h / d alpha_j = dh_j * Omega_s
            J = np.hstack([dh, dh * self.omega[s]])
            rows_hi.append(-J[self.mask_hi])
            rows_lo.append(J[self.mask_lo])
        return np.vstack(rows_hi + rows_lo)

    def labels(self):
        names = constraint_labels(self.case, self.spec)
        S = len(self.sc)
        out = [(s, f"{names[i]}:upper") for s in range(S) for i in np.flatnonzero(self.mask_hi)]
        out += [(s, f"{names[i]}:lower") for s in range(S) for i in np.flatnonzero(self.mask_lo)]
        return out


def scenario_cc_opf(case: GridCase, scenarios: ScenarioSet, options: ScenarioOptions | None = None,
                    spec: OutputSpec | None = None, init=None) -> ScenarioResult:
    """Dispatch and participation factors feasible for every sampled scenario.

    Each major iteration linearizes the per-scenario power-flow constraints
    around the current point, solves the resulting trust-region QP (with an
    elastic slack so it is always feasible) and accepts the step through a
    cost/violation filter.

    Parameters
    ----------
    init : (u, alpha), optional
        Starting point; default is the base-case AC-OPF dispatch with equal
        participation.
    """
    options = options or ScenarioOptions()
    spec = OutputSpec.default(case) if spec is None else spec
    n = case.n_u
    gens = [case.generators[k] for k in case.controllable]
    c2 = np.array([g.c2 for g in gens])
    c1 = np.array([g.c1 for g in gens])
    c0 = np.array([g.c0 for g in gens])
    sigma_w = scenarios.sigma
    if init is None:
        b = base_case(case, spec)
        z = np.concatenate([b.u, b.alpha])
    else:
        z = np.concatenate([np.asarray(init[0], float), np.asarray(init[1], float)])
    target = float(z[:n].sum())
    lb = np.concatenate([[g.p_min for g in gens], np.zeros(n)])
    ub = np.concatenate([[g.p_max for g in gens], np.ones(n)])
    model = _ScenarioModel(case, spec, scenarios, options.fd_step)
    scale = max(abs(expected_cost(z[:n], z[n:], sigma_w, c2, c1, c0)), 1.0)

    def cost(x):
        return expected_cost(x[:n], x[n:], sigma_w, c2, c1, c0)

    def cost_grad(x):
        T = float(np.sum(sigma_w**2))
        return np.concatenate([2 * c2 * x[:n] + c1, 2 * c2 * T * x[n:]])

    A_eq = np.vstack([np.concatenate([np.ones(n), np.zeros(n)]),
                      np.concatenate([np.zeros(n), np.ones(n)])])
    b_eq = np.array([target, 1.0])

    g, H = model.outputs(z)
    if g is None:
        raise GpCcOpfError("power flow fails for a scenario at the starting point")

    def violation(gv):
        return max(0.0, -float(gv.min())) if gv.size else 0.0

    radius = options.trust_radius
    filt = []
    log = []
    status, message = "max_iter", f"no convergence in {options.max_iter} iterations"
    it = 0
    for it in range(1, options.max_iter + 1):
        J = model.jacobian(z, H)
        viol = violation(g)
        f0 = cost(z)
        grad = cost_grad(z)
        # keep only rows that can become active inside the trust region
        reach = g - np.abs(J).sum(axis=1) * radius
        rows = np.flatnonzero(reach < 0)
        Jr, gr = J[rows], g[rows]
        lo = np.maximum(lb - z, -radius)
        hi = np.minimum(ub - z, radius)
        # QP in (d, t): quadratic cost model plus elastic penalty on t >= 0
        quad = np.concatenate([c2, c2 * float(np.sum(sigma_w**2))])

        def qp_obj(w):
            d = w[:-1]
            return (grad @ d + quad @ (d * d)) / scale + options.penalty * w[-1]

        def qp_grad(w):
            d = w[:-1]
            return np.concatenate([(grad + 2 * quad * d) / scale, [options.penalty]])

        cons = [{"type": "eq", "fun": lambda w: A_eq @ (z + w[:-1]) - b_eq,
                 "jac": lambda w: np.hstack([A_eq, np.zeros((2, 1))])}]
        if rows.size:
            cons.append({"type": "ineq", "fun": lambda w: gr + Jr @ w[:-1] + w[-1],
                         "jac": lambda w: np.hstack([Jr, np.ones((rows.size, 1))])})
        w0 = np.zeros(2 * n + 1)
        w0[-1] = max(viol, 0.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            qp = minimize(qp_obj, w0, jac=qp_grad, method="SLSQP",
                          bounds=list(zip(lo, hi)) + [(0.0, None)], constraints=cons,
                          options={"ftol": 1e-12, "maxiter": 200})
        d = np.clip(qp.x[:-1], lo, hi)
        t = float(qp.x[-1])
        step = float(np.max(np.abs(d)))
        if step < options.step_tol:
            if viol <= options.feas_tol:
                status, message = "converged", "step below tolerance at a feasible point"
            elif t > options.feas_tol or radius <= options.min_radius:
                status, message = "infeasible", "linearized scenario constraints cannot be met"
            else:
                radius *= 0.5
                continue
            break
        trial = z + d
        trial[n:] = np.clip(trial[n:], 0.0, 1.0)
        trial[n:] /= trial[n:].sum()
        g_t, H_t = model.outputs(trial)
        accepted = False
        if g_t is not None:
            viol_t = violation(g_t)
            f_t = cost(trial)
            dominated = any(viol_t >= (1 - options.gamma) * v_f and f_t >= f_f - options.gamma * v_f
                            for v_f, f_f in filt)
            pred = -(grad @ d + quad @ (d * d))
            sufficient = viol > options.feas_tol or viol_t > options.feas_tol or \
                f0 - f_t >= 1e-4 * pred - 1e-12 * scale
            accepted = not dominated and sufficient and viol_t <= max(viol, options.feas_tol) * 1.5 + 1e-3
        if accepted:
            if viol > options.feas_tol:
                filt.append((viol, f0))
            z, g, H = trial, g_t, H_t
            log.append((it, f_t, viol_t, step, radius))
            if step >= 0.9 * radius:
                radius = min(2.0 * radius, 1.0)
        else:
            radius *= 0.5
            log.append((it, f0, viol, 0.0, radius))
            if radius < options.min_radius:
                status = "converged" if viol <= options.feas_tol else "infeasible"
                message = "trust region collapsed"
                break
    viol = violation(g)
    blocking = []
    if viol > options.feas_tol:
        labels = model.labels()
        for i in np.argsort(g)[:5]:
            if g[i] < -options.feas_tol:
                s, name = labels[i]
                blocking.append(f"scenario {s}: {name}")
        if status == "converged":
            status = "infeasible"
    return ScenarioResult(z[:n].copy(), z[n:].copy(), cost(z), it, status, message, viol,
                          blocking, log)


# --- Monte-Carlo validation --------------------------------------------------
@dataclass
class ValidationReport:
    """Empirical behaviour of a dispatch under sampled fluctuations.

    ``joint_violation`` is the frequency of samples violating any monitored
    output or generator limit; failed power flows count as violations.
    """

    labels: list
    lower_limit: np.ndarray
    upper_limit: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    q_low: np.ndarray
    q_high: np.ndarray
    viol_lower: np.ndarray
    viol_upper: np.ndarray
    joint_violation: float
    n_samples: int
    failures: int
    seed: int
    cost: float = float("nan")
    surrogate_q_low: np.ndarray | None = None
    surrogate_q_high: np.ndarray | None = None
    surrogate_mean: np.ndarray | None = None
    analytic: dict = field(default_factory=dict)
    rmse: float | None = None
    timings: dict = field(default_factory=dict)

    @property
    def max_violation(self) -> float:
        return float(np.max(np.maximum(self.viol_lower, self.viol_upper)))

    def to_csv(self) -> str:
        """One row per constrained quantity, formatted for plotting spreads."""
        methods = sorted(self.analytic)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["variable", "lower_limit", "upper_limit", "mean", "std", "q_0.27", "q_99.73",
                  "empirical_upper_margin", "empirical_lower_margin"]
        if self.surrogate_q_low is not None:
            header += ["surrogate_upper_margin", "surrogate_lower_margin"]
        header += [f"analytic_3std_{m}" for m in methods]
        header += ["violation_lower", "violation_upper"]
        w.writerow(header)
        n_y = self.surrogate_q_low.size if self.surrogate_q_low is not None else None
        for i, label in enumerate(self.labels):
            row = [label, _r(self.lower_limit[i]), _r(self.upper_limit[i]), _r(self.mean[i]),
                   _r(self.std[i]), _r(self.q_low[i]), _r(self.q_high[i]),
                   _r(self.q_high[i] - self.mean[i]), _r(self.mean[i] - self.q_low[i])]
            if self.surrogate_q_low is not None:
                if i < n_y:
                    row += [_r(self.surrogate_q_high[i] - self.surrogate_mean[i]),
                            _r(self.surrogate_mean[i] - self.surrogate_q_low[i])]
                else:
                    row += ["", ""]
            for m in methods:
                lam = self.analytic[m]
                row.append(_r(lam[i]) if i < len(lam) else "")
            row += [_r(self.viol_lower[i]), _r(self.viol_upper[i])]
            w.writerow(row)
        return buf.getvalue()

    def summary(self) -> dict:
        worst = int(np.argmax(np.maximum(self.viol_lower, self.viol_upper)))
        out = {"violation_definition": "joint = fraction of samples violating any constraint; "
                                       "failed power flows count as violations",
               "joint_violation": self.joint_violation,
               "max_per_constraint_violation": self.max_violation,
               "worst_constraint": self.labels[worst],
               "n_samples": self.n_samples, "failures": self.failures, "seed": self.seed,
               "cost": self.cost}
        if self.rmse is not None:
            out["rmse"] = self.rmse
        return out

    def summary_text(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True) + "\n"


def _r(x):
    x = float(x)
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def mc_validate(case: GridCase, u, alpha, n_samples: int = 1000, seed: int = 0,
                spec: OutputSpec | None = None, model: MultiGpModel | None = None,
                analytic: dict | None = None, sigma=None, cost: float = float("nan"),
                stream: int = 1) -> ValidationReport:
    """Validate a dispatch with affine recourse on sampled fluctuations.

    Parameters
    ----------
    u, alpha : array_like
        Controllable set-points and participation factors.
    model : MultiGpModel, optional
        If given, the surrogate is evaluated on the same samples and its
        empirical spread is reported alongside the power-flow one.
    analytic : dict, optional
        ``method -> 3-std margins`` of the monitored outputs.

    Raises
    ------
    TooManyFailures
        More than 5% of the sampled power flows diverged.
    """
    spec = OutputSpec.default(case) if spec is None else spec
    u = np.asarray(u, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    sc = ScenarioSet.sample(case, n_samples, seed, stream=stream, sigma=sigma)
    omega = sc.imbalance
    lo, hi = constraint_limits(case, spec)
    H = np.full((n_samples, lo.size), np.nan)
    X = np.empty((n_samples, case.n_u + sc.sigma.size))
    warm = None
    for i in range(n_samples):
        gen_p = recourse_dispatch(case, u, alpha, omega[i])
        load_p, res_p = sc.injections(case, i)
        X[i] = np.concatenate([gen_p[case.controllable], load_p, res_p])
        h, sol = _solve_outputs(case, spec, gen_p, load_p, res_p, warm)
        if h is not None:
            H[i] = h
            warm = warm or (sol.v, sol.theta)
    failed = np.all(np.isnan(H), axis=1)
    n_fail = int(failed.sum())
    if n_fail > MAX_DIVERGED * n_samples:
        raise TooManyFailures(f"{n_fail} of {n_samples} Monte-Carlo power flows diverged")
    viol_lo, viol_hi, joint = violation_rates(H, lo, hi)
    ok = H[~failed]
    q_lo, q_hi = np.quantile(ok, QUANTILES, axis=0)
    report = ValidationReport(
        labels=constraint_labels(case, spec), lower_limit=lo, upper_limit=hi,
        mean=ok.mean(axis=0), std=ok.std(axis=0), q_low=q_lo, q_high=q_hi,
        viol_lower=viol_lo, viol_upper=viol_hi, joint_violation=joint, n_samples=n_samples,
        failures=n_fail, seed=seed, cost=float(cost), analytic=dict(analytic or {}))
    if model is not None:
        mean_gp, _ = predict_multi(model, X)
        report.surrogate_mean = mean_gp.mean(axis=0)
        report.surrogate_q_low, report.surrogate_q_high = np.quantile(mean_gp, QUANTILES, axis=0)
        report.rmse = float(np.mean(np.sqrt(np.mean((mean_gp[~failed] - ok[:, :mean_gp.shape[1]])**2,
                                                      axis=0))))
    return report


# --- accuracy metrics --------------------------------------------------------
@dataclass
class RmseReport:
    labels: list
    per_output: np.ndarray

    @property
    def average(self) -> float:
        return float(np.mean(self.per_output))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["output", "rmse"])
        for label, v in zip(self.labels, self.per_output):
            w.writerow([label, repr(float(v))])
        w.writerow(["average", repr(self.average)])
        return buf.getvalue()


def rmse(Y_true, Y_pred) -> np.ndarray:
    """Per-column root mean squared error."""
    Y_true = np.atleast_2d(np.asarray(Y_true, dtype=float))
    Y_pred = np.atleast_2d(np.asarray(Y_pred, dtype=float))
    return np.sqrt(np.mean((Y_true - Y_pred) ** 2, axis=0))


def row_fingerprints(X) -> set:
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
    return {hashlib.sha256(row.tobytes()).hexdigest() for row in X}


def rmse_report(model: MultiGpModel, X, Y, labels=None) -> RmseReport:
    """RMSE of the surrogate mean on a held-out set.

    Raises
    ------
    ValidationError
        A test row also appears in the training inputs.
    """
    if row_fingerprints(model.X) & row_fingerprints(X):
        raise ValidationError("test set overlaps the training data")
    mean, _ = predict_multi(model, np.atleast_2d(X))
    labels = list(labels) if labels is not None else list(model.y_labels)
    return RmseReport(labels, rmse(Y, mean))


def propagated_mean_rmse(case: GridCase, model: MultiGpModel, X, alpha=None,
                         methods=("ta1", "ta2", "em"), n_mc: int = 200, seed: int = 0,
                         spec: OutputSpec | None = None, sigma=None) -> dict:
    """RMSE of propagated means against Monte-Carlo averages of the power flow.

    For every row ``x`` of ``X`` the uncertain input is centred at ``x`` with
    the affine-recourse covariance; the reference is the sample mean of the
    exact outputs over ``n_mc`` fluctuations around that row.

    Returns
    -------
    dict
        ``method -> average RMSE`` over outputs.
    """
    spec = OutputSpec.default(case) if spec is None else spec
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = case.n_u
    n_l = len(case.loads)
    alpha = np.full(n, 1.0 / n) if alpha is None else np.asarray(alpha, dtype=float)
    sigma = case.injection_sigma if sigma is None else np.asarray(sigma, dtype=float)
    signs = injection_signs(case)
    cov = assemble_input_cov(alpha, sigma, signs)
    targets, preds = [], {m: [] for m in methods}
    n_y = model.n_outputs
    for r, x in enumerate(X):
        sc = ScenarioSet.sample(case, n_mc, seed, stream=1000 + r, sigma=sigma)
        omega = sc.imbalance
        ys = []
        warm = None
        for i in range(n_mc):
            gen_p = case.gen_p_ref.copy()
            gen_p[case.controllable] = x[:n] + alpha * omega[i]
            load_p = x[n:n + n_l] + sc.omega[i, :n_l]
            res_p = x[n + n_l:] + sc.omega[i, n_l:]
            h, sol = _solve_outputs(case, spec, gen_p, load_p, res_p, warm)
            if h is not None:
                ys.append(h[:n_y])
                warm = warm or (sol.v, sol.theta)
        targets.append(np.mean(ys, axis=0))
        for m in methods:
            preds[m].append(propagate(model, x, cov, m).mean)
    targets = np.array(targets)
    return {m: float(np.mean(rmse(targets, np.array(preds[m])))) for m in methods}


__all__ = ["ScenarioSet", "ScenarioOptions", "ScenarioResult", "BaseCaseResult", "RecourseResult",
           "ValidationReport", "RmseReport", "base_case", "full_recourse", "scenario_cc_opf",
           "mc_validate", "rmse", "rmse_report", "propagated_mean_rmse", "violation_rates",
           "recourse_dispatch", "injection_signs", "constraint_labels", "constraint_limits",
           "ac_opf", "generation_cost"]
