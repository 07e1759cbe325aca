"""Pushing a Gaussian input distribution through fitted GP surrogates.

Three approximations are offered: first- and second-order Taylor
expansions around the input mean (``ta1``, ``ta2``) and exact moment
matching (``em``) for the SE-ARD kernel.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .backend import core
from .errors import InvalidAlpha, PropagationFailure, ValidationError
from .gp.core import GpModel
from .gp.multi import MultiGpModel, predict_multi

METHODS = ("ta1", "ta2", "em")


@dataclass(frozen=True)
class InputDistribution:
    mean: np.ndarray
    cov: np.ndarray
    n_u: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))
        self.validate()

    def validate(self):
        n = self.mean.size
        if self.cov.shape != (n, n):
            raise ValidationError("covariance shape does not match mean")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-12):
            raise ValidationError("covariance is not symmetric")
        if n and np.linalg.eigvalsh(self.cov).min() < -1e-10:
            raise ValidationError("covariance is not positive semidefinite")


@dataclass
class PropagatedOutput:
    mean: np.ndarray
    var: np.ndarray
    method: str
    fallback: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def std(self):
        return np.sqrt(self.var)


def check_alpha(alpha, tol: float = 1e-8):
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < -1e-10) or abs(alpha.sum() - 1.0) > tol:
        raise InvalidAlpha("participation factors must be nonnegative and sum to one")
    return alpha


def assemble_input_cov(alpha, sigma_w, signs=None, check: bool = True) -> np.ndarray:
    """Joint covariance of ``(u + alpha * Omega, omega)``.

    Parameters
    ----------
    alpha : array_like, shape (n_u,)
        Participation factors.
    sigma_w : array_like, shape (n_d,)
        Standard deviations of the independent injection fluctuations.
    signs : array_like, shape (n_d,), optional
        Contribution of each fluctuation to the imbalance ``Omega``:
        ``+1`` for consumption (default), ``-1`` for production.
    """
    alpha = check_alpha(alpha) if check else np.asarray(alpha, dtype=float)
    var_w = np.asarray(sigma_w, dtype=float) ** 2
    if np.any(np.asarray(sigma_w) < 0):
        raise ValidationError("negative injection standard deviation")
    signs = np.ones_like(var_w) if signs is None else np.asarray(signs, dtype=float)
    total = var_w.sum()
    n_u = alpha.size
    cov = np.zeros((n_u + var_w.size, n_u + var_w.size))
    cov[:n_u, :n_u] = total * np.outer(alpha, alpha)
    cov[:n_u, n_u:] = np.outer(alpha, signs * var_w)
    cov[n_u:, :n_u] = cov[:n_u, n_u:].T
    cov[n_u:, n_u:] = np.diag(var_w)
    return cov


# --- single-output derivatives ---------------------------------------------
def _k_and_diff(model: GpModel, x):
    x = np.asarray(x, dtype=float)
    w = model.params.inv_ls2
    diff = model.X - x
    k = model.params.signal_var * np.exp(-0.5 * (diff * diff) @ w)
    return k, diff, w


def mean_gradient(model: GpModel, x) -> np.ndarray:
    """Gradient of the predictive mean with respect to the test input."""
    k, diff, w = _k_and_diff(model, x)
    return w * (diff.T @ (model.beta * k))


def mean_hessian(model: GpModel, x) -> np.ndarray:
    k, diff, w = _k_and_diff(model, x)
    bk = model.beta * k
    scaled = diff * w
    return scaled.T @ (bk[:, None] * scaled) - bk.sum() * np.diag(w)


def _variance_terms(model, x):
    """Kernel vector and its input derivative, both whitened by the Cholesky factor.

    Working with ``L^-1 k`` rather than ``(K + noise I)^-1 k`` keeps the
    variance and its derivatives accurate when the Gram matrix is close to
    singular.
    """
    k, diff, w = _k_and_diff(model, x)
    scaled = diff * w
    G = k[:, None] * scaled  # d k / d x
    v = solve_triangular(model.L, k, lower=True)
    LG = solve_triangular(model.L, G, lower=True)
    gamma = solve_triangular(model.L.T, v, lower=False)
    return k, scaled, w, v, LG, gamma


def variance_gradient(model: GpModel, x) -> np.ndarray:
    """Gradient of the deterministic predictive variance."""
    _, _, _, v, LG, _ = _variance_terms(model, x)
    return -2.0 * LG.T @ v


def variance_hessian(model: GpModel, x) -> np.ndarray:
    """Hessian of the deterministic predictive variance."""
    k, scaled, w, _, LG, gamma = _variance_terms(model, x)
    gk = gamma * k
    second = scaled.T @ (gk[:, None] * scaled) - gk.sum() * np.diag(w)
    return -2.0 * (LG.T @ LG + second)


def _predict_one(model, x):
    k, _, _ = _k_and_diff(model, x)
    mean = float(k @ model.beta + model.y_mean)
    v = solve_triangular(model.L, k, lower=True)
    return mean, max(model.params.signal_var - float(v @ v), 0.0)


# --- propagation -------------------------------------------------------------
def ta_mean(model: MultiGpModel, mu) -> np.ndarray:
    """Taylor-approximation mean: the deterministic prediction at ``mu``."""
    return predict_multi(model, np.asarray(mu, dtype=float))[0]


def ta1_variance(model: MultiGpModel, mu, cov) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    out = []
    for m in model.models:
        _, var = _predict_one(m, mu)
        g = mean_gradient(m, mu)
        out.append(var + g @ cov @ g)
    return np.maximum(np.array(out), 0.0)


def ta2_variance(model: MultiGpModel, mu, cov) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    out = []
    for m in model.models:
        _, var = _predict_one(m, mu)
        g = mean_gradient(m, mu)
        H = variance_hessian(m, mu)
        out.append(var + g @ cov @ g + 0.5 * np.sum(H * cov))
    return np.maximum(np.array(out), 0.0)


def em_single(model: GpModel, mu, cov):
    """Exact predictive mean and variance of one GP under a Gaussian input."""
    mu = np.asarray(mu, dtype=float)
    cov = np.asarray(cov, dtype=float)
    sf2 = model.params.signal_var
    lam = model.params.lengthscales ** 2
    inv_sqrt = 1.0 / np.sqrt(lam)
    V = model.X - mu
    # determinant factors in the symmetric scaled form
    S = cov * np.outer(inv_sqrt, inv_sqrt)
    eye = np.eye(mu.size)
    _, logdet1 = np.linalg.slogdet(S + eye)
    _, logdet2 = np.linalg.slogdet(2.0 * S + eye)
    quad = np.einsum("id,id->i", V, np.linalg.solve(cov + np.diag(lam), V.T).T)
    logq = np.log(sf2) - 0.5 * logdet1 - 0.5 * quad
    q = np.exp(logq)
    mean_c = float(q @ model.beta)
    logk = np.log(sf2) - 0.5 * (V * V) @ (1.0 / lam)
    M = np.diag(1.0 / lam) - np.linalg.inv(2.0 * cov + np.diag(lam))
    M = 0.5 * (M + M.T)
    Q = core.em_q(np.ascontiguousarray(V), np.ascontiguousarray(M), logk, -0.5 * logdet2)
    var = sf2 - np.sum(model.inverse_gram() * Q) + model.beta @ Q @ model.beta - mean_c**2
    return mean_c + model.y_mean, float(var)


def em_moments(model: MultiGpModel, mu, cov, fallback_tol: float = 1e-8):
    """Moment-matched means and variances for every output.

    Outputs whose moments are non-finite, or whose variance is negative
    beyond round-off, fall back to the second-order Taylor result; the
    returned boolean mask marks them.
    """
    means, vars_, flags = [], [], []
    for m in model.models:
        with np.errstate(all="ignore"):
            mean, var = em_single(m, mu, cov)
        bad = not (np.isfinite(mean) and np.isfinite(var)) or var < -fallback_tol * max(
            m.params.signal_var, 1.0)
        if bad:
            single = MultiGpModel([m])
            mean = float(ta_mean(single, mu)[0])
            var = float(ta2_variance(single, mu, cov)[0])
            warnings.warn("moment matching ill-conditioned; using second-order Taylor",
                          RuntimeWarning, stacklevel=2)
        means.append(mean)
        vars_.append(max(var, 0.0))
        flags.append(bad)
    return np.array(means), np.array(vars_), np.array(flags)


def propagate(model: MultiGpModel, mu, cov, method: str = "ta1") -> PropagatedOutput:
    """Mean and variance of every output under ``N(mu, cov)``."""
    method = method.lower()
    if method == "ta1":
        out = PropagatedOutput(ta_mean(model, mu), ta1_variance(model, mu, cov), method,
                               np.zeros(model.n_outputs, dtype=bool))
    elif method == "ta2":
        out = PropagatedOutput(ta_mean(model, mu), ta2_variance(model, mu, cov), method,
                               np.zeros(model.n_outputs, dtype=bool))
    elif method == "em":
        mean, var, flags = em_moments(model, mu, cov)
        out = PropagatedOutput(mean, var, method, flags)
    else:
        raise ValueError(f"unknown propagation method {method!r}")
    if not (np.all(np.isfinite(out.mean)) and np.all(np.isfinite(out.var))):
        raise PropagationFailure(f"{method}: non-finite moments")
    return out


def ta1_jacobians(model: MultiGpModel, mu, cov_grad_alpha):
    """TA1 moments with derivatives with respect to the input mean.

    Parameters
    ----------
    cov_grad_alpha : callable
        ``g -> (g^T cov g, d(g^T cov g)/d alpha)`` for a mean gradient ``g``.

    Returns
    -------
    mean, var : ndarray, shape (n_y,)
    dmean_dx, dvar_dx : ndarray, shape (n_y, n_x)
    dvar_dalpha : ndarray, shape (n_y, n_u)
    """
    means, vars_, dm, dv, da = [], [], [], [], []
    for m in model.models:
        k, scaled, w, v, LG, _ = _variance_terms(m, mu)
        mean = float(k @ m.beta + m.y_mean)
        var0 = max(m.params.signal_var - float(v @ v), 0.0)
        bk = m.beta * k
        g = scaled.T @ bk
        Hm = scaled.T @ (bk[:, None] * scaled) - bk.sum() * np.diag(w)
        dvar0 = -2.0 * LG.T @ v
        quad, dquad_alpha, cov_g = cov_grad_alpha(g)
        means.append(mean)
        vars_.append(var0 + quad)
        dm.append(g)
        dv.append(dvar0 + 2.0 * Hm @ cov_g)
        da.append(dquad_alpha)
    return (np.array(means), np.array(vars_), np.array(dm), np.array(dv), np.array(da))


__all__ = ["InputDistribution", "PropagatedOutput", "assemble_input_cov", "check_alpha",
           "ta_mean", "ta1_variance", "ta2_variance", "em_single", "em_moments", "propagate",
           "mean_gradient", "mean_hessian", "variance_gradient", "variance_hessian",
           "ta1_jacobians", "METHODS"]
