"""Support-restricted likelihood geometry.

Log-likelihoods here drop the carrier ``k(y, tau)``; it cancels from every
posterior ratio, so log-marginals are only comparable within one dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .design import GroupedDesign, PaddedVector, SingularBlockError
from .family import GlmFamily

GTOL = 1e-8
XTOL = 1e-10
MAX_ITER = 200
ARMIJO_C = 1e-4
BETA_CAP = 100.0

STATUS_OK = 0
STATUS_MAXITER = 1
STATUS_SEPARATED = 2
STATUS_SINGULAR = 3
STATUS_LINESEARCH = 4
STATUS_NAMES = {0: "converged", 1: "max_iter", 2: "separated", 3: "singular", 4: "line_search"}


def as_dispersion(tau, n: int) -> np.ndarray:
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (n,)).copy()
    if np.any(~(tau > 0)) or not np.all(np.isfinite(tau)):
        raise ValueError("dispersions must be positive and finite")
    return tau


@dataclass
class RestrictedModel:
    family: GlmFamily
    design: GroupedDesign
    tau: np.ndarray
    support: tuple
    y: np.ndarray

    def __post_init__(self):
        self.support = self.design.check_support(self.support)
        self.tau = as_dispersion(self.tau, self.design.n)
        self.y = np.asarray(self.y, dtype=float)
        if self.y.shape != (self.design.n,):
            raise ValueError("response length must equal n")
        self.xs = self.design.sub(self.support)

    @property
    def p(self) -> int:
        return self.xs.shape[1]

    def with_response(self, y) -> "RestrictedModel":
        return RestrictedModel(self.family, self.design, self.tau, self.support, y)


def loglik_grad_hess(model: RestrictedModel, beta_S) -> tuple[float, np.ndarray, np.ndarray]:
    """Restricted log-likelihood, score and observed negative Hessian."""
    beta_S = np.asarray(beta_S, dtype=float).ravel()
    if beta_S.size != model.p:
        raise ValueError(f"coefficient block has length {beta_S.size}, support needs {model.p}")
    eta = model.xs @ beta_S
    l, s, a = model.family.loglik_terms(model.y, eta, model.tau)
    xs = model.xs
    H = xs.T @ (a[:, None] * xs)
    return float(np.sum(l)), xs.T @ s, 0.5 * (H + H.T)


def loglik_value(model: RestrictedModel, beta_S) -> float:
    eta = model.xs @ np.asarray(beta_S, dtype=float)
    l, _, _ = model.family.loglik_terms(model.y, eta, model.tau)
    return float(np.sum(l))


def expected_info(model: RestrictedModel, beta_S) -> np.ndarray:
    eta = model.xs @ np.asarray(beta_S, dtype=float)
    w = model.family.fisher_weight(eta, model.tau)
    return model.xs.T @ (np.asarray(w)[:, None] * model.xs)


@dataclass
class FitResult:
    beta_hat: np.ndarray
    loglik: float
    observed_info: np.ndarray
    converged: bool
    iterations: int
    boundary_hit: bool = False
    separated: bool = False
    status: int = STATUS_OK
    info_pd: bool = True

    @property
    def status_name(self) -> str:
        return STATUS_NAMES[self.status]


def _chol(H):
    try:
        return np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return None


def _cho_solve(L, b):
    return np.linalg.solve(L.T, np.linalg.solve(L, b))


class _Ellipsoid:
    """Radial clipping onto ``{b : ||M^{1/2}(b - c)|| <= R}``."""

    def __init__(self, center, metric, radius):
        self.center = np.asarray(center, dtype=float)
        evals, evecs = np.linalg.eigh(np.asarray(metric, dtype=float))
        if evals[0] <= 0:
            raise np.linalg.LinAlgError("ellipsoid metric must be positive definite")
        self.root = evecs @ np.diag(np.sqrt(evals)) @ evecs.T
        self.radius = float(radius)

    def norm(self, b):
        return float(np.linalg.norm(self.root @ (b - self.center)))

    def clip(self, b):
        r = self.norm(b)
        if r <= self.radius:
            return b, False
        return self.center + (b - self.center) * (self.radius / r), True


def newton_maximize(objective, x0, *, fallback_hess=None, max_iter=MAX_ITER, gtol=GTOL,
                    xtol=XTOL, beta_cap=BETA_CAP, ellipsoid: _Ellipsoid | None = None):
    """Damped Newton ascent with Armijo backtracking.

    ``objective(x)`` returns ``(f, grad, neg_hess)``; ``fallback_hess(x)``
    supplies a positive definite curvature (Fisher scoring) when the
    negative Hessian is not positive definite.  Returns
    ``(x, f, grad, neg_hess, status, iters, clipped)``.
    """
    x = np.array(x0, dtype=float)
    clipped = False
    if ellipsoid is not None:
        x, clipped = ellipsoid.clip(x)
    f, g, H = objective(x)
    if not np.isfinite(f):
        raise FloatingPointError("objective is not finite at the starting point")
    status = STATUS_MAXITER
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(g) <= gtol * (1.0 + abs(f)):
            status, it = STATUS_OK, it - 1
            break
        L = _chol(H)
        if L is None and fallback_hess is not None:
            L = _chol(fallback_hess(x))
        if L is None:
            status = STATUS_SINGULAR
            break
        d = _cho_solve(L, g)
        slope = float(g @ d)
        t = 1.0
        accepted = False
        for _ in range(60):
            cand = x + t * d
            was_clipped = False
            if ellipsoid is not None:
                cand, was_clipped = ellipsoid.clip(cand)
            fc, gc, Hc = objective(cand)
            gain = ARMIJO_C * t * slope if not was_clipped else ARMIJO_C * float(g @ (cand - x))
            if np.isfinite(fc) and fc >= f + gain:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            status = STATUS_LINESEARCH
            break
        step = cand - x
        x, f, g, H, clipped = cand, fc, gc, Hc, was_clipped
        if np.linalg.norm(x) > beta_cap:
            status = STATUS_SEPARATED
            break
        if np.linalg.norm(step) <= xtol * (1.0 + np.linalg.norm(x)):
            status = STATUS_OK
            break
        if clipped and float(g @ (x - ellipsoid.center)) > 0:
            # gradient pushes outward at the boundary; test the tangential part
            n_vec = ellipsoid.root @ (ellipsoid.root @ (x - ellipsoid.center))
            n_vec /= np.linalg.norm(n_vec)
            tang = g - (g @ n_vec) * n_vec
            if np.linalg.norm(tang) <= gtol * (1.0 + abs(f)) or np.linalg.norm(step) <= 1e3 * xtol:
                status = STATUS_OK
                break
    return x, f, g, H, status, it, clipped


def restricted_mle(model: RestrictedModel, init=None, radius: float = math.inf, center=None,
                   metric=None, max_iter: int = MAX_ITER, beta_cap: float = BETA_CAP) -> FitResult:
    """Maximize the restricted log-likelihood, optionally over an ellipsoid."""
    if model.p == 0:
        raise ValueError("the empty support has no coefficients to fit")
    x0 = np.zeros(model.p) if init is None else np.asarray(init, dtype=float)
    ell = None
    if math.isfinite(radius):
        if radius <= 0:
            raise ValueError("radius must be positive")
        c = np.zeros(model.p) if center is None else np.asarray(center, dtype=float)
        M = expected_info(model, c) if metric is None else metric
        ell = _Ellipsoid(c, M, radius)
    x, f, g, H, status, it, clipped = newton_maximize(
        lambda b: loglik_grad_hess(model, b), x0,
        fallback_hess=lambda b: expected_info(model, b),
        max_iter=max_iter, beta_cap=beta_cap, ellipsoid=ell)
    if status == STATUS_LINESEARCH and np.linalg.norm(g) <= 1e-6 * (1.0 + abs(f)):
        status = STATUS_OK  # stalled at roundoff level
    H = 0.5 * (H + H.T)
    return FitResult(x, f, H, status == STATUS_OK, it, bool(clipped),
                     status == STATUS_SEPARATED, status, _chol(H) is not None)


@dataclass
class PopulationCenter:
    support: tuple
    beta_circ: np.ndarray
    fisher_circ: np.ndarray
    converged: bool = True

    def inv_sqrt(self) -> np.ndarray:
        return sym_inv_sqrt(self.fisher_circ, self.support)


def sym_inv_sqrt(M, support=()) -> np.ndarray:
    evals, evecs = np.linalg.eigh(np.asarray(M, dtype=float))
    if evals.size and evals[0] <= 0:
        raise SingularBlockError(support)
    return (evecs / np.sqrt(evals)) @ evecs.T


def sym_sqrt(M) -> np.ndarray:
    evals, evecs = np.linalg.eigh(np.asarray(M, dtype=float))
    return (evecs * np.sqrt(np.clip(evals, 0, None))) @ evecs.T


def true_mean(family: GlmFamily, design: GroupedDesign, truth: PaddedVector) -> np.ndarray:
    return np.asarray(family.mean(design.x @ design.embed(truth)), dtype=float)


def pseudo_true_center(family: GlmFamily, design: GroupedDesign, tau, support,
                       truth: PaddedVector, radius: float = math.inf) -> PopulationCenter:
    """Maximizer of the expected restricted log-likelihood.

    The expectation only enters through the linear-in-``y`` term, so the
    response is replaced by the true mean.
    """
    support = design.check_support(support)
    if not support:
        raise ValueError("the empty support has no pseudo-true center")
    beta0 = design.embed(truth)
    mu0 = true_mean(family, design, truth)
    pop = RestrictedModel(family, design, tau, support, mu0)
    init = beta0[design.columns(support)]
    fit = restricted_mle(pop, init=init, radius=radius,
                         center=init if math.isfinite(radius) else None)
    _, _, H = loglik_grad_hess(pop, fit.beta_hat)
    H = 0.5 * (H + H.T)
    if _chol(H) is None:
        raise SingularBlockError(support, "population Fisher block")
    return PopulationCenter(support, fit.beta_hat, H, fit.converged)


def normalized_score(model: RestrictedModel, center: PopulationCenter) -> np.ndarray:
    """``(F_S^o)^{-1/2}`` times the restricted score at the center (symmetric root)."""
    if model.p == 0:
        raise ValueError("the normalized score is undefined on the empty support")
    _, g, _ = loglik_grad_hess(model, center.beta_circ)
    return center.inv_sqrt() @ g


def lan_remainder(model: RestrictedModel, center: PopulationCenter, h) -> float:
    h = np.asarray(h, dtype=float)
    d = center.inv_sqrt() @ h
    l0, g0, _ = loglik_grad_hess(model, center.beta_circ)
    l1 = loglik_value(model, center.beta_circ + d)
    return abs(l1 - l0 - d @ g0 + 0.5 * d @ center.fisher_circ @ d)


@dataclass
class SchurResult:
    excess: float
    Gbar: np.ndarray
    Fbar: np.ndarray
    direct: float

    @property
    def rel_error(self) -> float:
        return abs(self.excess - self.direct) / max(abs(self.direct), 1e-300)


def schur_projection(F_S, G_S, p_S0: int) -> SchurResult:
    """Superset excess ``G'F^{-1}G - G0'F00^{-1}G0`` via the Schur complement.

    ``Gbar = G1 - F10 F00^{-1} G0`` and ``Fbar = F11 - F10 F00^{-1} F01``;
    the excess equals ``Gbar' Fbar^{-1} Gbar``.  The direct difference is
    also returned for comparison.
    """
    F = np.asarray(F_S, dtype=float)
    G = np.asarray(G_S, dtype=float).ravel()
    p = G.size
    if F.shape != (p, p):
        raise ValueError("F_S and G_S dimensions disagree")
    if not 0 <= p_S0 <= p:
        raise ValueError("p_S0 out of range")
    A, B, D = F[:p_S0, :p_S0], F[:p_S0, p_S0:], F[p_S0:, p_S0:]
    G0, G1 = G[:p_S0], G[p_S0:]
    if p_S0:
        LA = _chol(A)
        if LA is None:
            raise np.linalg.LinAlgError("leading principal block is not positive definite")
        AinvB = _cho_solve(LA, B)
        AinvG0 = _cho_solve(LA, G0)
        Fbar = D - B.T @ AinvB
        Gbar = G1 - B.T @ AinvG0
        base = float(G0 @ AinvG0)
    else:
        Fbar, Gbar, base = D.copy(), G1.copy(), 0.0
    Fbar = 0.5 * (Fbar + Fbar.T)
    if Gbar.size:
        LF = _chol(Fbar)
        if LF is None:
            raise np.linalg.LinAlgError("Schur complement is not positive definite")
        z = np.linalg.solve(LF, Gbar)
        excess = float(z @ z)
        LS = _chol(F)
        zs = np.linalg.solve(LS, G)
        direct = float(zs @ zs) - base
    else:
        excess, direct = 0.0, 0.0
    return SchurResult(excess, Gbar, Fbar, direct)
