"""Single-output GP regression with an SE-ARD kernel.

Hyperparameters are fitted on standardized inputs and centered targets.
The fitted length scales are then expressed in raw input units, so a
model evaluates the kernel directly on unscaled inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from ..backend import se_ard
from ..errors import AllRestartsFailed, FactorizationFailure, ValidationError

NOISE_FLOOR = 1e-10
JITTERS = (0.0, 1e-10, 1e-8, 1e-6)
LOG2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class KernelParams:
    """Signal variance, per-input length scales and noise variance."""

    signal_var: float
    lengthscales: np.ndarray
    noise_var: float

    def __post_init__(self):
        object.__setattr__(self, "lengthscales", np.asarray(self.lengthscales, dtype=float))
        if not self.signal_var > 0:
            raise ValidationError("signal variance must be positive")
        if np.any(self.lengthscales <= 0):
            raise ValidationError("length scales must be positive")
        if self.noise_var < 0:
            raise ValidationError("noise variance must be nonnegative")

    @property
    def inv_ls2(self):
        return 1.0 / self.lengthscales**2

    def to_log(self):
        return np.concatenate([[np.log(self.signal_var)], np.log(self.lengthscales),
                               [np.log(self.noise_var)]])

    @classmethod
    def from_log(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(float(np.exp(theta[0])), np.exp(theta[1:-1]), float(np.exp(theta[-1])))


def kernel_eval(params: KernelParams, x_i, x_j) -> float:
    d = np.asarray(x_i, dtype=float) - np.asarray(x_j, dtype=float)
    return float(params.signal_var * np.exp(-0.5 * np.sum(d * d * params.inv_ls2)))


def kernel_matrix(params: KernelParams, X1, X2=None):
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = X1 if X2 is None else np.atleast_2d(np.asarray(X2, dtype=float))
    return se_ard(X1, X2, params.inv_ls2, params.signal_var)


def cholesky_jitter(A):
    """Lower Cholesky factor of ``A``, escalating diagonal jitter if needed.

    Returns
    -------
    L : ndarray
    jitter : float
        Absolute jitter that was added to the diagonal.
    """
    scale = float(np.mean(np.diag(A)))
    for rel in JITTERS:
        jitter = rel * scale
        try:
            return np.linalg.cholesky(A + jitter * np.eye(len(A))), jitter
        except np.linalg.LinAlgError:
            continue
    raise FactorizationFailure("Gram matrix not positive definite after jitter escalation")


def nll(theta, X, y, with_grad: bool = True):
    """Negative log marginal likelihood and its gradient in log-parameters.

    ``theta = [log signal_var, log lengthscales..., log noise_var]``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n = len(y)
    p = KernelParams.from_log(theta)
    K = se_ard(X, X, p.inv_ls2, p.signal_var)
    A = K.copy()
    A[np.diag_indices(n)] += p.noise_var
    L, _ = cholesky_jitter(A)
    alpha = cho_solve((L, True), y)
    value = 0.5 * y @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * n * LOG2PI
    if not with_grad:
        return float(value)
    W = cho_solve((L, True), np.eye(n)) - np.outer(alpha, alpha)
    M = W * K
    g_sf = 0.5 * np.sum(M)
    row = M.sum(axis=1)
    # sum_ij M_ij (x_id - x_jd)^2 for all d at once
    quad = 2.0 * (row @ (X * X)) - 2.0 * np.einsum("id,id->d", X, M @ X)
    g_ls = 0.5 * quad * p.inv_ls2
    g_noise = 0.5 * p.noise_var * np.trace(W)
    return float(value), np.concatenate([[g_sf], g_ls, [g_noise]])


@dataclass(frozen=True)
class FitOptions:
    restarts: int = 5
    max_iter: int = 300
    seed: int = 0
    ls_range: tuple = (0.1, 10.0)


@dataclass
class GpModel:
    """Fitted single-output GP.

    Attributes
    ----------
    params : KernelParams
        Length scales are in raw input units.
    X : ndarray
        Raw training inputs.
    y : ndarray
        Raw training targets.
    y_mean : float
        Target offset used as the prior mean.
    x_mean, x_scale : ndarray
        Standardization constants used during fitting.
    """

    params: KernelParams
    X: np.ndarray
    y: np.ndarray
    y_mean: float
    x_mean: np.ndarray
    x_scale: np.ndarray
    nll: float = float("nan")

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float)
        A = self.gram()
        A[np.diag_indices(len(A))] += self.params.noise_var
        self.L, self.jitter = cholesky_jitter(A)
        self.beta = cho_solve((self.L, True), self.y - self.y_mean)
        self._inv = None

    def gram(self):
        return kernel_matrix(self.params, self.X)

    @property
    def n_inputs(self):
        return self.X.shape[1]

    def inverse_gram(self):
        """``(K + noise I)^-1`` from the cached factor (computed once)."""
        if self._inv is None:
            self._inv = cho_solve((self.L, True), np.eye(len(self.y)))
            self._inv.setflags(write=False)
        return self._inv

    def to_dict(self):
        return {"signal_var": self.params.signal_var,
                "lengthscales": self.params.lengthscales.tolist(),
                "noise_var": self.params.noise_var, "y_mean": self.y_mean,
                "x_mean": self.x_mean.tolist(), "x_scale": self.x_scale.tolist(),
                "nll": self.nll, "y": self.y.tolist()}

    @classmethod
    def from_dict(cls, data, X):
        params = KernelParams(data["signal_var"], data["lengthscales"], data["noise_var"])
        return cls(params, X, np.array(data["y"]), data["y_mean"], np.array(data["x_mean"]),
                   np.array(data["x_scale"]), data.get("nll", float("nan")))


def standardize(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return (X - mean) / scale, mean, scale


def fit(X, y, options: FitOptions | None = None) -> GpModel:
    """Fit hyperparameters by multi-restart L-BFGS on the NLL.

    The first start uses unit length scales (in standardized units), the
    target variance as signal variance and 1e-4 of it as noise variance;
    the remaining starts are drawn from ``options.seed``.

    Raises
    ------
    AllRestartsFailed
        No restart produced a finite NLL.
    """
    options = options or FitOptions()
    Xs, x_mean, x_scale = standardize(X)
    y = np.asarray(y, dtype=float)
    if len(y) != Xs.shape[0]:
        raise ValidationError("X and y lengths differ")
    y_mean = float(y.mean())
    yc = y - y_mean
    n, d = Xs.shape
    var = max(float(np.var(yc)), 1e-12)
    lo = np.concatenate([[np.log(var * 1e-6)], np.full(d, np.log(1e-2)),
                         [np.log(NOISE_FLOOR)]])
    hi = np.concatenate([[np.log(var * 1e4 + 1e-10)], np.full(d, np.log(1e4)),
                         [np.log(max(var, NOISE_FLOOR * 10))]])
    start0 = np.concatenate([[np.log(var)], np.zeros(d), [np.log(max(1e-4 * var, NOISE_FLOOR))]])
    rng = np.random.default_rng(options.seed)
    starts = [start0]
    for _ in range(options.restarts - 1):
        s = start0.copy()
        s[0] += rng.uniform(-1.0, 1.0)
        s[1:-1] = rng.uniform(np.log(options.ls_range[0]), np.log(options.ls_range[1]), d)
        s[-1] += rng.uniform(-2.0, 2.0)
        starts.append(np.clip(s, lo, hi))

    def objective(theta):
        try:
            return nll(theta, Xs, yc)
        except (FactorizationFailure, ValidationError):
            return 1e25, np.zeros_like(theta)

    best = None
    for s in starts:
        try:
            res = minimize(objective, np.clip(s, lo, hi), jac=True, method="L-BFGS-B",
                           bounds=list(zip(lo, hi)), options={"maxiter": options.max_iter})
        except (FactorizationFailure, np.linalg.LinAlgError, ValueError):
            continue
        if np.isfinite(res.fun) and res.fun < 1e24 and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise AllRestartsFailed("no restart reached a finite NLL")
    p = KernelParams.from_log(best.x)
    raw = KernelParams(p.signal_var, p.lengthscales * x_scale, p.noise_var)
    return GpModel(raw, np.asarray(X, dtype=float), y, y_mean, x_mean, x_scale, float(best.fun))


def predict(model: GpModel, x_star):
    """Predictive mean and variance at one point or a batch of points."""
    xs = np.asarray(x_star, dtype=float)
    single = xs.ndim == 1
    Xs = np.atleast_2d(xs)
    k = kernel_matrix(model.params, model.X, Xs)  # (N, M)
    mean = k.T @ model.beta + model.y_mean
    v = solve_triangular(model.L, k, lower=True)
    var = np.maximum(model.params.signal_var - np.sum(v * v, axis=0), 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


__all__ = ["KernelParams", "GpModel", "FitOptions", "kernel_eval", "kernel_matrix", "nll",
           "fit", "predict", "cholesky_jitter", "standardize", "NOISE_FLOOR"]
