"""Pure-numpy implementations of the hot kernels.

Mirrors the API of the compiled ``_core`` extension exactly; used when the
extension is unavailable or ``GPCCOPF_PURE_PYTHON=1`` is set.
"""
import numpy as np

CONVERGED, MAX_ITER, SINGULAR = 0, 1, 2


def se_ard(X1, X2, inv_ls2, sf2):
    """SE-ARD cross covariance ``sf2 * exp(-0.5 * sum_d (x1-x2)_d^2 * inv_ls2_d)``."""
    X1 = np.asarray(X1, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    w = np.sqrt(np.asarray(inv_ls2, dtype=float))
    A = X1 * w
    B = X2 * w
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(d2, 0.0, out=d2)
    return sf2 * np.exp(-0.5 * d2)


def em_q(V, M, logk, logc):
    """Moment-matching cross term ``Q`` for one output.

    ``V`` holds ``x_i - mu`` row-wise, ``M`` the symmetric exponent matrix,
    ``logk`` the log kernel values at the input mean and ``logc`` the log of
    the determinant prefactor.
    """
    P = V @ M @ V.T
    d = np.diag(P)
    E = 0.25 * (d[:, None] + d[None, :] + 2.0 * P)
    return np.exp(logk[:, None] + logk[None, :] + logc + E)


def _power(G, B, v, theta):
    dt = theta[:, None] - theta[None, :]
    c = np.cos(dt)
    s = np.sin(dt)
    C = G * c + B * s
    S = G * s - B * c
    P = v * (C @ v)
    Q = v * (S @ v)
    return P, Q, C, S


def newton_pf(G, B, v, theta, p_spec, q_spec, pvpq, pq, tol, max_iter):
    """Polar Newton-Raphson on the bus mismatch equations.

    ``v`` and ``theta`` are updated in place. Returns
    ``(status, iterations, max_mismatch)``.
    """
    npvpq = len(pvpq)
    npq = len(pq)
    it = 0
    while True:
        P, Q, C, S = _power(G, B, v, theta)
        F = np.concatenate([P[pvpq] - p_spec[pvpq], Q[pq] - q_spec[pq]])
        err = np.max(np.abs(F)) if F.size else 0.0
        if not np.isfinite(err):
            return MAX_ITER, it, err
        if err < tol:
            return CONVERGED, it, err
        if it >= max_iter:
            return MAX_ITER, it, err
        vv = np.outer(v, v)
        dP_dt = vv * S
        dQ_dt = -vv * C
        dP_dv = v[:, None] * C
        dQ_dv = v[:, None] * S
        diag = np.arange(len(v))
        Gd = np.diag(G)
        Bd = np.diag(B)
        dP_dt[diag, diag] = -Q - Bd * v * v
        dQ_dt[diag, diag] = P - Gd * v * v
        dP_dv[diag, diag] = P / v + Gd * v
        dQ_dv[diag, diag] = Q / v - Bd * v
        J = np.empty((npvpq + npq, npvpq + npq))
        J[:npvpq, :npvpq] = dP_dt[np.ix_(pvpq, pvpq)]
        J[:npvpq, npvpq:] = dP_dv[np.ix_(pvpq, pq)]
        J[npvpq:, :npvpq] = dQ_dt[np.ix_(pq, pvpq)]
        J[npvpq:, npvpq:] = dQ_dv[np.ix_(pq, pq)]
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return SINGULAR, it, err
        if not np.all(np.isfinite(dx)):
            return SINGULAR, it, err
        theta[pvpq] += dx[:npvpq]
        v[pq] += dx[npvpq:]
        it += 1


def bus_power(G, B, v, theta):
    P, Q, _, _ = _power(G, B, np.asarray(v, float), np.asarray(theta, float))
    return P, Q
