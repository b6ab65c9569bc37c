# cython: language_level=3
"""Compiled hot kernels: batched supportwise Newton fits and pointwise
log-likelihood evaluation.  Semantics match ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, fabs, isfinite, expm1, M_PI
from libc.stdlib cimport malloc, free
from scipy.special.cython_special cimport erfcx, log_ndtr

cnp.import_array()

cdef double SQRT_2_OVER_PI = sqrt(2.0 / M_PI)
cdef double INV_SQRT_2PI = 1.0 / sqrt(2.0 * M_PI)
cdef double SQRT2 = sqrt(2.0)
cdef double ARMIJO_C = 1e-4

cdef enum:
    K_GAUSSIAN = 0
    K_LOGISTIC = 1
    K_POISSON = 2
    K_PROBIT = 3
    K_GAMMA = 4
    K_NEGBIN = 5


cdef inline double _expit(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _log1pexp(double x) noexcept nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _mills(double x) noexcept nogil:
    # phi(x) / Phi(x)
    return SQRT_2_OVER_PI / erfcx(-x / SQRT2)


cdef inline double _lam_minus_x(double x) noexcept nogil:
    cdef double v
    cdef int k
    if x <= 8.0:
        return SQRT_2_OVER_PI / erfcx(x / SQRT2) - x
    v = x
    for k in range(200, 1, -1):
        v = x + k / v
    return 1.0 / v


cdef inline void _terms(int kind, double y, double eta, double tau, double r, double logr,
                        double* l, double* s, double* a) noexcept nogil:
    cdef double p, e, lse, q, lp, lm
    if kind == K_GAUSSIAN:
        l[0] = (y * eta - 0.5 * eta * eta) / tau
        s[0] = (y - eta) / tau
        a[0] = 1.0 / tau
    elif kind == K_LOGISTIC:
        # one exponential serves b, b' and b''
        e = exp(-fabs(eta))
        q = 1.0 / (1.0 + e)
        p = q if eta >= 0 else e * q
        l[0] = (y * eta - (eta if eta > 0 else 0.0) - log1p(e)) / tau
        s[0] = (y - p) / tau
        a[0] = e * q * q / tau
    elif kind == K_POISSON:
        e = exp(eta)
        l[0] = (y * eta - e) / tau
        s[0] = (y - e) / tau
        a[0] = e / tau
    elif kind == K_PROBIT:
        lp = _mills(eta)    # phi/Phi(eta)
        lm = _mills(-eta)   # phi/Phi(-eta)
        l[0] = (y * log_ndtr(eta) + (1.0 - y) * log_ndtr(-eta)) / tau
        s[0] = (y * lp - (1.0 - y) * lm) / tau
        a[0] = (y * lp * _lam_minus_x(-eta) + (1.0 - y) * lm * _lam_minus_x(eta)) / tau
    elif kind == K_GAMMA:
        e = exp(-eta)
        l[0] = (-y * e - eta) / tau
        s[0] = (y * e - 1.0) / tau
        a[0] = y * e / tau
    else:
        if eta > logr:
            lse = eta + log1p(exp(logr - eta))
        else:
            lse = logr + log1p(exp(eta - logr))
        q = _expit(eta - logr)
        l[0] = (y * (eta - lse) + r * (logr - lse)) / tau
        s[0] = ((1.0 - q) * y - r * q) / tau
        a[0] = (y + r) * q * (1.0 - q) / tau


cdef inline double _lterm(int kind, double y, double eta, double tau, double r,
                          double logr) noexcept nogil:
    # value-only version of _terms
    cdef double lse
    if kind == K_GAUSSIAN:
        return (y * eta - 0.5 * eta * eta) / tau
    elif kind == K_LOGISTIC:
        return (y * eta - (eta if eta > 0 else 0.0) - log1p(exp(-fabs(eta)))) / tau
    elif kind == K_POISSON:
        return (y * eta - exp(eta)) / tau
    elif kind == K_PROBIT:
        return (y * log_ndtr(eta) + (1.0 - y) * log_ndtr(-eta)) / tau
    elif kind == K_GAMMA:
        return (-y * exp(-eta) - eta) / tau
    if eta > logr:
        lse = eta + log1p(exp(logr - eta))
    else:
        lse = logr + log1p(exp(eta - logr))
    return (y * (eta - lse) + r * (logr - lse)) / tau


cdef inline double _weight(int kind, double eta, double tau, double r) noexcept nogil:
    cdef double p, e
    if kind == K_GAUSSIAN or kind == K_GAMMA:
        return 1.0 / tau
    elif kind == K_LOGISTIC:
        p = _expit(eta)
        return p * _expit(-eta) / tau
    elif kind == K_POISSON:
        return exp(eta) / tau
    elif kind == K_PROBIT:
        return exp(-0.5 * eta * eta) * INV_SQRT_2PI * (_mills(eta) + _mills(-eta)) / tau
    else:
        e = exp(eta)
        return r * e / (r + e) / tau


cdef int _chol(double* H, double* L, int p) noexcept nogil:
    """Lower Cholesky factor of the p x p row-major H into L; 0 on success."""
    cdef int i, j, k
    cdef double acc
    for i in range(p):
        for j in range(i + 1):
            acc = H[i * p + j]
            for k in range(j):
                acc -= L[i * p + k] * L[j * p + k]
            if i == j:
                if not (acc > 0.0) or not isfinite(acc):
                    return 1
                L[i * p + i] = sqrt(acc)
            else:
                L[i * p + j] = acc / L[j * p + j]
        for j in range(i + 1, p):
            L[i * p + j] = 0.0
    return 0


cdef void _chol_solve(double* L, double* b, double* x, int p) noexcept nogil:
    cdef int i, k
    cdef double acc
    for i in range(p):
        acc = b[i]
        for k in range(i):
            acc -= L[i * p + k] * x[k]
        x[i] = acc / L[i * p + i]
    for i in range(p - 1, -1, -1):
        acc = x[i]
        for k in range(i + 1, p):
            acc -= L[k * p + i] * x[k]
        x[i] = acc / L[i * p + i]


cdef double _value(const double[:, ::1] X, const double[::1] y, const double[::1] tau,
                   int kind, double r, double logr, const long* c, int p,
                   const double* b) noexcept nogil:
    cdef Py_ssize_t i
    cdef int j
    cdef double eta, tot = 0.0
    for i in range(X.shape[0]):
        eta = 0.0
        for j in range(p):
            eta += X[i, c[j]] * b[j]
        tot += _lterm(kind, y[i], eta, tau[i], r, logr)
    return tot


cdef double _derivs(const double[:, ::1] X, const double[::1] y, const double[::1] tau,
                    int kind, double r, double logr, const long* c, int p, const double* b,
                    double* g, double* H, double* W, bint fisher) noexcept nogil:
    """Log-likelihood; fills score g, observed info H and Fisher info W."""
    cdef Py_ssize_t i
    cdef int j, k
    cdef double eta, l, s, a, w, xj, tot = 0.0
    for j in range(p):
        g[j] = 0.0
        for k in range(p):
            H[j * p + k] = 0.0
            if fisher:
                W[j * p + k] = 0.0
    for i in range(X.shape[0]):
        eta = 0.0
        for j in range(p):
            eta += X[i, c[j]] * b[j]
        _terms(kind, y[i], eta, tau[i], r, logr, &l, &s, &a)
        tot += l
        if fisher:
            w = _weight(kind, eta, tau[i], r)
        for j in range(p):
            xj = X[i, c[j]]
            g[j] += xj * s
            for k in range(j + 1):
                H[j * p + k] += a * xj * X[i, c[k]]
                if fisher:
                    W[j * p + k] += w * xj * X[i, c[k]]
    for j in range(p):
        for k in range(j):
            H[k * p + j] = H[j * p + k]
            if fisher:
                W[k * p + j] = W[j * p + k]
    return tot


cdef inline double _norm(const double* v, int p) noexcept nogil:
    cdef int j
    cdef double acc = 0.0
    for j in range(p):
        acc += v[j] * v[j]
    return sqrt(acc)


def fit_supports(const double[:, ::1] X, const double[::1] y, const double[::1] tau, int kind,
                 double r, const long[:, ::1] cols, const long[::1] parent,
                 const double[:, ::1] init,
                 double alpha, double prior_prec, int max_iter, double gtol,
                 double xtol, double beta_cap):
    cdef Py_ssize_t nsup = cols.shape[0]
    cdef int pmax = cols.shape[1]
    beta_np = np.zeros((nsup, pmax))
    loglik_np = np.zeros(nsup)
    info_np = np.zeros((nsup, pmax, pmax))
    status_np = np.zeros(nsup, dtype=np.int64)
    iters_np = np.zeros(nsup, dtype=np.int64)
    cdef double[:, ::1] beta = beta_np
    cdef double[::1] loglik = loglik_np
    cdef double[:, :, ::1] info = info_np
    cdef long[::1] status = status_np
    cdef long[::1] iters = iters_np

    cdef int q = pmax if pmax > 0 else 1
    cdef double* x = <double*> malloc(q * sizeof(double))
    cdef double* cand = <double*> malloc(q * sizeof(double))
    cdef double* d = <double*> malloc(q * sizeof(double))
    cdef double* g = <double*> malloc(q * sizeof(double))
    cdef double* H = <double*> malloc(q * q * sizeof(double))
    cdef double* W = <double*> malloc(q * q * sizeof(double))
    cdef double* L = <double*> malloc(q * q * sizeof(double))
    cdef long* c = <long*> malloc(q * sizeof(long))
    cdef double logr = log(r) if r > 0 else 0.0
    cdef Py_ssize_t jsup
    cdef int p, pp, j, k, it, st, ls, accepted
    cdef long par
    cdef double f, fc, ll, slope, t, gn, stepn, xn
    try:
        with nogil:
            for jsup in range(nsup):
                p = 0
                for j in range(pmax):
                    if cols[jsup, j] >= 0:
                        c[p] = cols[jsup, j]
                        p += 1
                if p == 0:
                    loglik[jsup] = _value(X, y, tau, kind, r, logr, c, 0, x)
                    continue
                par = parent[jsup]
                for j in range(p):
                    x[j] = 0.0 if par >= 0 else init[jsup, j]
                if par >= 0:
                    pp = 0
                    for j in range(pmax):
                        if cols[par, j] >= 0:
                            pp += 1
                    for j in range(pp):
                        x[j] = beta[par, j]
                ll = _derivs(X, y, tau, kind, r, logr, c, p, x, g, H, W, False)
                f = alpha * ll - 0.5 * prior_prec * _norm(x, p) ** 2
                for j in range(p):
                    g[j] = alpha * g[j] - prior_prec * x[j]
                    for k in range(p):
                        H[j * p + k] = alpha * H[j * p + k] + (prior_prec if j == k else 0.0)
                st = 1
                it = 0
                k = 1
                while k <= max_iter:
                    it = k
                    gn = _norm(g, p)
                    if gn <= gtol * (1.0 + fabs(f)):
                        st = 0
                        it = k - 1
                        break
                    if _chol(H, L, p) != 0:
                        _derivs(X, y, tau, kind, r, logr, c, p, x, d, L, W, True)
                        for j in range(p * p):
                            W[j] = alpha * W[j]
                        for j in range(p):
                            W[j * p + j] += prior_prec
                        if _chol(W, L, p) != 0:
                            st = 3
                            break
                    _chol_solve(L, g, d, p)
                    slope = 0.0
                    for j in range(p):
                        slope += g[j] * d[j]
                    t = 1.0
                    accepted = 0
                    for ls in range(60):
                        for j in range(p):
                            cand[j] = x[j] + t * d[j]
                        fc = alpha * _value(X, y, tau, kind, r, logr, c, p, cand) \
                            - 0.5 * prior_prec * _norm(cand, p) ** 2
                        if isfinite(fc) and fc >= f + ARMIJO_C * t * slope:
                            accepted = 1
                            break
                        t *= 0.5
                    if not accepted:
                        st = 4
                        break
                    stepn = 0.0
                    for j in range(p):
                        stepn += (cand[j] - x[j]) ** 2
                        x[j] = cand[j]
                    stepn = sqrt(stepn)
                    ll = _derivs(X, y, tau, kind, r, logr, c, p, x, g, H, W, False)
                    f = alpha * ll - 0.5 * prior_prec * _norm(x, p) ** 2
                    for j in range(p):
                        g[j] = alpha * g[j] - prior_prec * x[j]
                        for pp in range(p):
                            H[j * p + pp] = alpha * H[j * p + pp] + (prior_prec if j == pp else 0.0)
                    xn = _norm(x, p)
                    if xn > beta_cap:
                        st = 2
                        break
                    if stepn <= xtol * (1.0 + xn):
                        st = 0
                        break
                    k += 1
                if st == 4 and _norm(g, p) <= 1e-6 * (1.0 + fabs(f)):
                    st = 0
                ll = _derivs(X, y, tau, kind, r, logr, c, p, x, g, H, W, False)
                loglik[jsup] = ll
                for j in range(p):
                    beta[jsup, j] = x[j]
                    for pp in range(p):
                        info[jsup, j, pp] = H[j * p + pp]
                status[jsup] = st
                iters[jsup] = it
    finally:
        free(x); free(cand); free(d); free(g); free(H); free(W); free(L); free(c)
    return beta_np, loglik_np, info_np, status_np, iters_np


def loglik_points(const double[:, ::1] X, const double[::1] y, const double[::1] tau, int kind,
                  double r, const long[::1] cols, const double[:, ::1] B):
    cdef Py_ssize_t K = B.shape[0]
    cdef int p = cols.shape[0]
    out_np = np.empty(K)
    cdef double[::1] out = out_np
    cdef long* c = <long*> malloc((p if p > 0 else 1) * sizeof(long))
    cdef double logr = log(r) if r > 0 else 0.0
    cdef Py_ssize_t m
    cdef int j
    try:
        for j in range(p):
            c[j] = cols[j]
        with nogil:
            for m in range(K):
                out[m] = _value(X, y, tau, kind, r, logr, c, p, &B[m, 0] if p > 0 else NULL)
    finally:
        free(c)
    return out_np
