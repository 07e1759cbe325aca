# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: SE-ARD covariance, moment-matching Q matrix and the
polar Newton-Raphson power-flow loop. API matches ``_core_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sin, cos, fabs, isfinite

cnp.import_array()

CONVERGED, MAX_ITER, SINGULAR = 0, 1, 2


def se_ard(X1, X2, inv_ls2, double sf2):
    cdef double[:, ::1] a = np.ascontiguousarray(X1, dtype=np.float64)
    cdef double[:, ::1] b = np.ascontiguousarray(X2, dtype=np.float64)
    cdef double[::1] w = np.ascontiguousarray(inv_ls2, dtype=np.float64)
    cdef Py_ssize_t n1 = a.shape[0], n2 = b.shape[0], D = a.shape[1]
    out = np.empty((n1, n2))
    cdef double[:, ::1] K = out
    cdef Py_ssize_t i, j, d
    cdef double acc, diff
    for i in range(n1):
        for j in range(n2):
            acc = 0.0
            for d in range(D):
                diff = a[i, d] - b[j, d]
                acc += diff * diff * w[d]
            K[i, j] = sf2 * exp(-0.5 * acc)
    return out


def em_q(V, M, logk, double logc):
    cdef double[:, ::1] v = np.ascontiguousarray(V, dtype=np.float64)
    cdef double[:, ::1] m = np.ascontiguousarray(M, dtype=np.float64)
    cdef double[::1] lk = np.ascontiguousarray(logk, dtype=np.float64)
    cdef Py_ssize_t N = v.shape[0], D = v.shape[1]
    vm_arr = np.zeros((N, D))
    cdef double[:, ::1] vm = vm_arr
    cdef Py_ssize_t i, j, d, e
    cdef double acc
    for i in range(N):
        for d in range(D):
            acc = 0.0
            for e in range(D):
                acc += v[i, e] * m[e, d]
            vm[i, d] = acc
    diag_arr = np.empty(N)
    cdef double[::1] dg = diag_arr
    for i in range(N):
        acc = 0.0
        for d in range(D):
            acc += vm[i, d] * v[i, d]
        dg[i] = acc
    out = np.empty((N, N))
    cdef double[:, ::1] Q = out
    cdef double pij
    for i in range(N):
        for j in range(i, N):
            pij = 0.0
            for d in range(D):
                pij += vm[i, d] * v[j, d]
            Q[i, j] = exp(lk[i] + lk[j] + logc + 0.25 * (dg[i] + dg[j] + 2.0 * pij))
            Q[j, i] = Q[i, j]
    return out


cdef void _power(double[:, ::1] G, double[:, ::1] B, double[::1] v, double[::1] th,
                 double[::1] P, double[::1] Q, double[:, ::1] C, double[:, ::1] S) nogil:
    cdef Py_ssize_t n = v.shape[0], i, k
    cdef double c, s
    for i in range(n):
        P[i] = 0.0
        Q[i] = 0.0
        for k in range(n):
            c = cos(th[i] - th[k])
            s = sin(th[i] - th[k])
            C[i, k] = G[i, k] * c + B[i, k] * s
            S[i, k] = G[i, k] * s - B[i, k] * c
            P[i] += C[i, k] * v[k]
            Q[i] += S[i, k] * v[k]
        P[i] *= v[i]
        Q[i] *= v[i]


cdef int _solve(double[:, ::1] A, double[::1] x) nogil:
    """In-place Gaussian elimination with partial pivoting; x holds rhs on entry."""
    cdef Py_ssize_t n = A.shape[0], i, j, k, piv
    cdef double amax, t, scale = 0.0
    for i in range(n):
        for j in range(n):
            if fabs(A[i, j]) > scale:
                scale = fabs(A[i, j])
    if scale == 0.0:
        return 1
    for k in range(n):
        piv = k
        amax = fabs(A[k, k])
        for i in range(k + 1, n):
            if fabs(A[i, k]) > amax:
                amax = fabs(A[i, k])
                piv = i
        if amax <= 1e-14 * scale:
            return 1
        if piv != k:
            for j in range(n):
                t = A[k, j]
                A[k, j] = A[piv, j]
                A[piv, j] = t
            t = x[k]
            x[k] = x[piv]
            x[piv] = t
        for i in range(k + 1, n):
            t = A[i, k] / A[k, k]
            if t != 0.0:
                for j in range(k, n):
                    A[i, j] -= t * A[k, j]
                x[i] -= t * x[k]
    for i in range(n - 1, -1, -1):
        t = x[i]
        for j in range(i + 1, n):
            t -= A[i, j] * x[j]
        x[i] = t / A[i, i]
    return 0


def newton_pf(G_, B_, v_, theta_, p_spec_, q_spec_, pvpq_, pq_, double tol, int max_iter):
    cdef double[:, ::1] G = np.ascontiguousarray(G_, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(B_, dtype=np.float64)
    cdef double[::1] v = v_
    cdef double[::1] th = theta_
    cdef double[::1] ps = np.ascontiguousarray(p_spec_, dtype=np.float64)
    cdef double[::1] qs = np.ascontiguousarray(q_spec_, dtype=np.float64)
    cdef cnp.intp_t[::1] pvpq = np.ascontiguousarray(pvpq_, dtype=np.intp)
    cdef cnp.intp_t[::1] pq = np.ascontiguousarray(pq_, dtype=np.intp)
    cdef Py_ssize_t n = v.shape[0], n1 = pvpq.shape[0], n2 = pq.shape[0], m = n1 + n2
    cdef double[::1] P = np.empty(n)
    cdef double[::1] Q = np.empty(n)
    cdef double[:, ::1] C = np.empty((n, n))
    cdef double[:, ::1] S = np.empty((n, n))
    cdef double[:, ::1] J = np.empty((m, m))
    cdef double[::1] F = np.empty(m)
    cdef Py_ssize_t a, b, i, k
    cdef int it = 0
    cdef double err
    while True:
        _power(G, B, v, th, P, Q, C, S)
        err = 0.0
        for a in range(n1):
            F[a] = P[pvpq[a]] - ps[pvpq[a]]
            if not isfinite(F[a]):
                return MAX_ITER, it, float("nan")
            if fabs(F[a]) > err:
                err = fabs(F[a])
        for a in range(n2):
            F[n1 + a] = Q[pq[a]] - qs[pq[a]]
            if not isfinite(F[n1 + a]):
                return MAX_ITER, it, float("nan")
            if fabs(F[n1 + a]) > err:
                err = fabs(F[n1 + a])
        if err < tol:
            return CONVERGED, it, err
        if it >= max_iter:
            return MAX_ITER, it, err
        for a in range(n1):
            i = pvpq[a]
            for b in range(n1):
                k = pvpq[b]
                if i == k:
                    J[a, b] = -Q[i] - B[i, i] * v[i] * v[i]
                else:
                    J[a, b] = v[i] * v[k] * S[i, k]
            for b in range(n2):
                k = pq[b]
                if i == k:
                    J[a, n1 + b] = P[i] / v[i] + G[i, i] * v[i]
                else:
                    J[a, n1 + b] = v[i] * C[i, k]
        for a in range(n2):
            i = pq[a]
            for b in range(n1):
                k = pvpq[b]
                if i == k:
                    J[n1 + a, b] = P[i] - G[i, i] * v[i] * v[i]
                else:
                    J[n1 + a, b] = -v[i] * v[k] * C[i, k]
            for b in range(n2):
                k = pq[b]
                if i == k:
                    J[n1 + a, n1 + b] = Q[i] / v[i] - B[i, i] * v[i]
                else:
                    J[n1 + a, n1 + b] = v[i] * S[i, k]
        for a in range(m):
            F[a] = -F[a]
        if _solve(J, F) != 0:
            return SINGULAR, it, err
        for a in range(n1):
            th[pvpq[a]] += F[a]
        for a in range(n2):
            v[pq[a]] += F[n1 + a]
        it += 1


def bus_power(G_, B_, v_, theta_):
    cdef double[:, ::1] G = np.ascontiguousarray(G_, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(B_, dtype=np.float64)
    v_arr = np.array(v_, dtype=np.float64)
    th_arr = np.array(theta_, dtype=np.float64)
    cdef Py_ssize_t n = v_arr.shape[0]
    P = np.empty(n)
    Q = np.empty(n)
    _power(G, B, v_arr, th_arr, P, Q, np.empty((n, n)), np.empty((n, n)))
    return P, Q
