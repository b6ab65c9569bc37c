"""NumPy reference implementation of the hot kernels.

Mirrors ``_kernels.pyx`` step for step so both backends follow the same
iterates; only floating-point summation order differs.
"""

from __future__ import annotations

import numpy as np

from .family import KINDS, get_family
from .restricted import (STATUS_LINESEARCH, STATUS_OK, newton_maximize)


def _family(kind: int, r: float):
    name = KINDS[kind]
    return get_family(name, r if name == "negbin_log" else None)


def fit_supports(X, y, tau, kind, r, cols, parent, init, alpha, prior_prec,
                 max_iter, gtol, xtol, beta_cap):
    """Maximize ``alpha * l_S(b) - prior_prec * |b|^2 / 2`` on each support.

    ``cols`` is ``k x pmax`` with ``-1`` padding.  A support with
    ``parent >= 0`` is started from its parent's solution padded with zeros.
    Returns ``(beta, loglik, info, status, iters)`` where ``loglik`` and
    ``info`` are the unscaled log-likelihood and observed information at the
    returned point.
    """
    fam = _family(int(kind), float(r))
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    tau = np.asarray(tau, dtype=float)
    cols = np.asarray(cols, dtype=np.int64)
    k, pmax = cols.shape
    beta = np.zeros((k, pmax))
    loglik = np.zeros(k)
    info = np.zeros((k, pmax, pmax))
    status = np.zeros(k, dtype=np.int64)
    iters = np.zeros(k, dtype=np.int64)
    for j in range(k):
        c = cols[j][cols[j] >= 0]
        p = c.size
        if p == 0:
            l, _, _ = fam.loglik_terms(y, np.zeros_like(y), tau)
            loglik[j] = float(np.sum(l))
            continue
        xs = X[:, c]
        par = int(parent[j])
        x0 = np.zeros(p)
        if par >= 0:
            pc = cols[par][cols[par] >= 0].size
            x0[:pc] = beta[par, :pc]
        else:
            x0[:] = init[j, :p]

        def objective(b, xs=xs):
            l, s, a = fam.loglik_terms(y, xs @ b, tau)
            f = alpha * float(np.sum(l)) - 0.5 * prior_prec * float(b @ b)
            g = alpha * (xs.T @ s) - prior_prec * b
            H = alpha * (xs.T @ (a[:, None] * xs)) + prior_prec * np.eye(p)
            return f, g, H

        def fisher(b, xs=xs):
            w = np.asarray(fam.fisher_weight(xs @ b, tau))
            return alpha * (xs.T @ (w[:, None] * xs)) + prior_prec * np.eye(p)

        b, f, g, _, st, it, _ = newton_maximize(objective, x0, fallback_hess=fisher,
                                                max_iter=max_iter, gtol=gtol, xtol=xtol,
                                                beta_cap=beta_cap)
        if st == STATUS_LINESEARCH and np.linalg.norm(g) <= 1e-6 * (1.0 + abs(f)):
            st = STATUS_OK
        l, _, a = fam.loglik_terms(y, xs @ b, tau)
        beta[j, :p] = b
        loglik[j] = float(np.sum(l))
        Hj = xs.T @ (a[:, None] * xs)
        info[j, :p, :p] = 0.5 * (Hj + Hj.T)
        status[j] = st
        iters[j] = it
    return beta, loglik, info, status, iters


def loglik_points(X, y, tau, kind, r, cols, B):
    """Restricted log-likelihood at each row of ``B`` (``K x p_S``)."""
    fam = _family(int(kind), float(r))
    cols = np.asarray(cols, dtype=np.int64)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    xs = np.asarray(X, dtype=float)[:, cols]
    out = np.empty(B.shape[0])
    step = max(1, 2_000_000 // max(1, xs.shape[0]))
    for start in range(0, B.shape[0], step):
        eta = xs @ B[start:start + step].T
        l, _, _ = fam.loglik_terms(np.asarray(y, float)[:, None], eta, np.asarray(tau, float)[:, None])
        out[start:start + step] = l.sum(axis=0)
    return out
