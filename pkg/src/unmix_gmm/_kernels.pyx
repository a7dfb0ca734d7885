# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel kernels for the unmixing loop.

Each (pixel, combination) pair is handled independently with a hand-rolled
Cholesky factorization in thread-local scratch space. Pixels are distributed
over OpenMP threads with a static schedule; reductions over combinations and
classes run in fixed order inside one pixel, so results are bit-identical for
any thread count.
"""

import numpy as np

from cython.parallel cimport parallel, prange
from libc.math cimport log, sqrt
from libc.stdlib cimport free, malloc, qsort

from .core import NumericalError

NAME = "compiled"

cdef double LOG_2PI = 1.8378770664093453


cdef inline void _build(
    const double[:, ::1] Y, const double[:, ::1] A,
    const double[:, ::1] means, const double[:, :, ::1] covs,
    const Py_ssize_t[:, ::1] combos, const double[:, ::1] noise,
    Py_ssize_t n, Py_ssize_t k, double* S, double* r,
) noexcept nogil:
    """Lower triangle of Sigma_nk into S and y_n - mu_nk into r."""
    cdef Py_ssize_t d = Y.shape[1], M = A.shape[1]
    cdef Py_ssize_t a, b, j, c
    cdef double aj, a2
    for a in range(d):
        r[a] = Y[n, a]
        for b in range(a + 1):
            S[a * d + b] = noise[a, b]
    for j in range(M):
        c = combos[k, j]
        aj = A[n, j]
        a2 = aj * aj
        for a in range(d):
            r[a] -= aj * means[c, a]
            for b in range(a + 1):
                S[a * d + b] += a2 * covs[c, a, b]


cdef inline int _cholesky(double* S, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t i, j, p
    cdef double s, t
    for j in range(d):
        s = S[j * d + j]
        for p in range(j):
            s -= S[j * d + p] * S[j * d + p]
        if not (s > 0.0):
            return -1
        s = sqrt(s)
        S[j * d + j] = s
        for i in range(j + 1, d):
            t = S[i * d + j]
            for p in range(j):
                t -= S[i * d + p] * S[j * d + p]
            S[i * d + j] = t / s
    return 0


cdef inline void _forward(const double* L, double* z, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t i, p
    cdef double t
    for i in range(d):
        t = z[i]
        for p in range(i):
            t -= L[i * d + p] * z[p]
        z[i] = t / L[i * d + i]


cdef inline void _backward(const double* L, double* z, Py_ssize_t d) noexcept nogil:
    """Solve L^T x = z in place."""
    cdef Py_ssize_t i, p
    cdef double t
    for i in range(d - 1, -1, -1):
        t = z[i]
        for p in range(i + 1, d):
            t -= L[p * d + i] * z[p]
        z[i] = t / L[i * d + i]


cdef inline double _logdet(const double* L, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t i
    cdef double s = 0.0
    for i in range(d):
        s += log(L[i * d + i])
    return 2.0 * s


def log_joint(Y, A, comp_means, comp_covs, combos, log_prior, noise, int threads=1):
    """``log pi_k + log N(y_n | mu_nk, Sigma_nk)`` as an ``N x K`` array."""
    cdef const double[:, ::1] Yv = np.ascontiguousarray(Y, dtype=np.float64)
    cdef const double[:, ::1] Av = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[:, ::1] mv = np.ascontiguousarray(comp_means, dtype=np.float64)
    cdef const double[:, :, ::1] cv = np.ascontiguousarray(comp_covs, dtype=np.float64)
    cdef const Py_ssize_t[:, ::1] kv = np.ascontiguousarray(combos, dtype=np.intp)
    cdef const double[::1] lp = np.ascontiguousarray(log_prior, dtype=np.float64)
    cdef const double[:, ::1] Dv = np.ascontiguousarray(noise, dtype=np.float64)
    cdef Py_ssize_t N = Yv.shape[0], d = Yv.shape[1], K = kv.shape[0]
    out = np.empty((N, K), dtype=np.float64)
    bad = np.full(N, -1, dtype=np.intp)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t[::1] badv = bad
    cdef Py_ssize_t n, k, a
    cdef double* S
    cdef double* r
    cdef double quad
    cdef double base = d * LOG_2PI
    if threads < 1:
        threads = 1

    with nogil, parallel(num_threads=threads):
        S = <double*> malloc(sizeof(double) * (d * d + d))
        r = S + d * d
        for n in prange(N, schedule="static"):
            for k in range(K):
                _build(Yv, Av, mv, cv, kv, Dv, n, k, S, r)
                if _cholesky(S, d) != 0:
                    if badv[n] < 0:
                        badv[n] = k
                    ov[n, k] = 0.0
                    continue
                _forward(S, r, d)
                quad = 0.0
                for a in range(d):
                    quad = quad + r[a] * r[a]
                ov[n, k] = lp[k] - 0.5 * (base + _logdet(S, d) + quad)
        free(S)

    _raise_bad(bad)
    return out


def _raise_bad(bad):
    hit = np.flatnonzero(bad >= 0)
    if hit.size:
        n = int(hit[0])
        raise NumericalError(
            f"pixel covariance not positive definite at pixel {n}, combination {int(bad[n])}"
        )


def weighted_gradient(Y, A, comp_means, comp_covs, combos, noise, gamma, int threads=1):
    """Gradient of the M-step objective with responsibilities held fixed.

    Per pair ``(n, k)`` with ``w = Sigma^-1 (y - mu)`` and
    ``P = w w^T - Sigma^-1`` the class-``j`` entry receives
    ``-gamma * (w . mu_j + alpha_j * <P, Sigma_j>)``.
    """
    cdef const double[:, ::1] Yv = np.ascontiguousarray(Y, dtype=np.float64)
    cdef const double[:, ::1] Av = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[:, ::1] mv = np.ascontiguousarray(comp_means, dtype=np.float64)
    cdef const double[:, :, ::1] cv = np.ascontiguousarray(comp_covs, dtype=np.float64)
    cdef const Py_ssize_t[:, ::1] kv = np.ascontiguousarray(combos, dtype=np.intp)
    cdef const double[:, ::1] Dv = np.ascontiguousarray(noise, dtype=np.float64)
    cdef const double[:, ::1] Gv = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef Py_ssize_t N = Yv.shape[0], d = Yv.shape[1], K = kv.shape[0], M = Av.shape[1]
    out = np.zeros((N, M), dtype=np.float64)
    bad = np.full(N, -1, dtype=np.intp)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t[::1] badv = bad
    cdef Py_ssize_t n, k, a, b, p, j, c, lo
    cdef double* S
    cdef double* r
    cdef double* Li
    cdef double* P
    cdef double g, t, t1, t2
    if threads < 1:
        threads = 1

    with nogil, parallel(num_threads=threads):
        S = <double*> malloc(sizeof(double) * (3 * d * d + d))
        Li = S + d * d
        P = Li + d * d
        r = P + d * d
        for n in prange(N, schedule="static"):
            for k in range(K):
                g = Gv[n, k]
                if g == 0.0:
                    continue
                _build(Yv, Av, mv, cv, kv, Dv, n, k, S, r)
                if _cholesky(S, d) != 0:
                    if badv[n] < 0:
                        badv[n] = k
                    continue
                _forward(S, r, d)
                _backward(S, r, d)
                # Li = L^-1 (lower triangular), column by column.
                for b in range(d):
                    for a in range(d):
                        Li[a * d + b] = 0.0
                    Li[b * d + b] = 1.0 / S[b * d + b]
                    for a in range(b + 1, d):
                        t = 0.0
                        for p in range(b, a):
                            t = t + S[a * d + p] * Li[p * d + b]
                        Li[a * d + b] = -t / S[a * d + a]
                # P = w w^T - L^-T L^-1, lower triangle.
                for a in range(d):
                    for b in range(a + 1):
                        t = 0.0
                        for p in range(a, d):
                            t = t + Li[p * d + a] * Li[p * d + b]
                        P[a * d + b] = r[a] * r[b] - t
                for j in range(M):
                    c = kv[k, j]
                    t1 = 0.0
                    for a in range(d):
                        t1 = t1 + r[a] * mv[c, a]
                    t2 = 0.0
                    for a in range(d):
                        t2 = t2 + P[a * d + a] * cv[c, a, a]
                        for b in range(a):
                            t2 = t2 + 2.0 * P[a * d + b] * cv[c, a, b]
                    ov[n, j] = ov[n, j] - g * (t1 + Av[n, j] * t2)
        free(S)

    _raise_bad(bad)
    return out


cdef int _desc(const void* x, const void* y) noexcept nogil:
    cdef double a = (<const double*> x)[0]
    cdef double b = (<const double*> y)[0]
    if a < b:
        return 1
    if a > b:
        return -1
    return 0


def project_simplex_rows(V):
    """Euclidean projection of every row onto the probability simplex (sort and threshold)."""
    cdef const double[:, ::1] Vv = np.ascontiguousarray(V, dtype=np.float64)
    cdef Py_ssize_t N = Vv.shape[0], M = Vv.shape[1]
    out = np.empty((N, M), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double* u = <double*> malloc(sizeof(double) * (M if M > 0 else 1))
    cdef Py_ssize_t n, i
    cdef double css, theta, x
    try:
        with nogil:
            for n in range(N):
                for i in range(M):
                    u[i] = Vv[n, i]
                qsort(u, M, sizeof(double), _desc)
                css = 0.0
                theta = 0.0
                for i in range(M):
                    css += u[i]
                    if u[i] - (css - 1.0) / (i + 1) > 0.0:
                        theta = (css - 1.0) / (i + 1)
                for i in range(M):
                    x = Vv[n, i] - theta
                    ov[n, i] = x if x > 0.0 else 0.0
    finally:
        free(u)
    return out
