"""Support-enumerated fractional posteriors.

The posterior over ``(S, beta_S)`` is computed support by support: each
support gets a log marginal (exact integral or Laplace proxy) which, added to
the log prior support mass, gives an unnormalized log weight.  Weights are
normalized with log-sum-exp after sorting supports lexicographically, so the
result does not depend on evaluation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import special, stats

from . import kernels
from .dataset import Dataset
from .design import (DEFAULT_ENUMERATION_CAP, SingularBlockError, enumerate_supports,
                     parallel_map, supersets_of)
from .prior import SasPrior, log_slab_density, log_slab_grad_hess
from .restricted import (STATUS_NAMES, STATUS_OK, RestrictedModel,
                         loglik_grad_hess, newton_maximize, pseudo_true_center)

LOG_2PI = math.log(2.0 * math.pi)
T_DF = 4.0
CENTER_MODES = ("auto", "mode", "mle", "score_quadratic")


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

def _chol_or_raise(M, support):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise SingularBlockError(support) from None


def gaussian_logpdf(B, mean, chol_prec):
    """Log density of ``N(mean, (L L^T)^{-1})`` at the rows of ``B``."""
    B = np.atleast_2d(B)
    p = mean.size
    z = (B - mean) @ chol_prec
    return -0.5 * p * LOG_2PI + float(np.sum(np.log(np.diag(chol_prec)))) - 0.5 * np.sum(z * z, axis=1)


def gaussian_draws(mean, chol_prec, k, rng):
    z = rng.standard_normal((k, mean.size))
    # solve L^T x = z  =>  x ~ N(0, (L L^T)^{-1})
    return mean + np.linalg.solve(chol_prec.T, z.T).T


@dataclass
class SupportEntry:
    support: tuple
    log_weight: float
    mean: np.ndarray
    precision: np.ndarray
    log_marginal: float = 0.0
    method: str = "laplace"
    se: float = 0.0
    flags: tuple = ()
    log_density: Callable | None = field(default=None, repr=False, compare=False)

    @property
    def p(self) -> int:
        return self.mean.size

    def chol_precision(self) -> np.ndarray:
        if self.p == 0:
            return np.zeros((0, 0))
        return _chol_or_raise(self.precision, self.support)

    def logpdf(self, B) -> np.ndarray:
        """Density of the within-support law (exact if available, else Gaussian)."""
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if self.log_density is not None:
            return self.log_density(B)
        return gaussian_logpdf(B, self.mean, self.chol_precision())


@dataclass
class SupportPosterior:
    alpha: float
    entries: list
    group_sizes: tuple
    mode: str = "laplace"
    normalized: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: e.support)
        self._index = {e.support: i for i, e in enumerate(self.entries)}

    @property
    def supports(self) -> list:
        return [e.support for e in self.entries]

    def log_weights(self) -> np.ndarray:
        return np.array([e.log_weight for e in self.entries])

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights())

    def entry(self, support) -> SupportEntry | None:
        i = self._index.get(tuple(support))
        return None if i is None else self.entries[i]

    def weight_of(self, support) -> float:
        e = self.entry(support)
        return 0.0 if e is None else math.exp(e.log_weight)

    def size_masses(self) -> np.ndarray:
        out = np.zeros(len(self.group_sizes) + 1)
        for e in self.entries:
            out[len(e.support)] += math.exp(e.log_weight)
        return out

    @property
    def p(self) -> int:
        return sum(self.group_sizes)

    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.group_sizes)]).astype(int)

    def columns(self, support) -> np.ndarray:
        off = self.offsets()
        if not support:
            return np.zeros(0, dtype=int)
        return np.concatenate([np.arange(off[g], off[g + 1]) for g in support])

    def to_json_dict(self) -> dict:
        entries = []
        for e in self.entries:
            L = e.chol_precision() if e.p else np.zeros((0, 0))
            entries.append({
                "groups": list(e.support),
                "log_weight": float(e.log_weight),
                "mean": [float(v) for v in e.mean],
                "precision_cholesky": [[float(v) for v in row[: i + 1]] for i, row in enumerate(L)],
                "log_marginal": float(e.log_marginal),
                "method": e.method,
                "se": float(e.se),
                "flags": list(e.flags),
            })
        return {
            "alpha": float(self.alpha),
            "mode": self.mode,
            "group_sizes": list(self.group_sizes),
            "normalized": self.normalized,
            "meta": self.meta,
            "entries": entries,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SupportPosterior":
        d = json.loads(text)
        entries = []
        for e in d["entries"]:
            rows = e["precision_cholesky"]
            p = len(rows)
            L = np.zeros((p, p))
            for i, row in enumerate(rows):
                L[i, : len(row)] = row
            entries.append(SupportEntry(tuple(e["groups"]), e["log_weight"], np.array(e["mean"], dtype=float),
                                        L @ L.T, e.get("log_marginal", 0.0), e.get("method", "laplace"),
                                        e.get("se", 0.0), tuple(e.get("flags", ()))))
        return cls(d["alpha"], entries, tuple(d["group_sizes"]), d.get("mode", "laplace"),
                   d.get("normalized", True), d.get("meta", {}))


def normalize_entries(entries: list) -> list:
    """Shift log weights so they sum to one (log-sum-exp after sorting)."""
    entries = sorted(entries, key=lambda e: e.support)
    lw = np.array([e.log_weight for e in entries])
    lz = special.logsumexp(lw)
    for e, v in zip(entries, lw - lz):
        e.log_weight = float(v)
    return entries


@dataclass
class MarginalEstimate:
    support: tuple
    log_laplace: float
    log_exact: float
    exact_method: str
    exact_se: float
    level: int = 0
    mc: int = 0
    ess: float = 0.0
    unreliable: bool = False


# ---------------------------------------------------------------------------
# per-support pieces
# ---------------------------------------------------------------------------

def resolve_center_mode(center_mode: str, prior: SasPrior) -> str:
    if center_mode not in CENTER_MODES:
        raise ValueError(f"center_mode must be one of {CENTER_MODES}")
    if center_mode == "auto":
        return "mode" if prior.slab.gaussian else "mle"
    return center_mode


def _slab_logpdf_batch(prior: SasPrior, support, B) -> np.ndarray:
    B = np.atleast_2d(B)
    if not support:
        return np.zeros(B.shape[0])
    out = np.zeros(B.shape[0])
    if prior.slab.gaussian:
        s2 = prior.slab.sigma2
        return -0.5 * B.shape[1] * math.log(2 * math.pi * s2) - 0.5 * np.sum(B * B, axis=1) / s2
    for g, sl in zip(support, prior.blocks(support)):
        m = prior.group_sizes[g]
        out += prior.slab.log_group_density_at_zero(m) - prior.slab.lam * np.linalg.norm(B[:, sl], axis=1)
    return out


def _logdet_chol(L) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def laplace_from_fit(prior: SasPrior, support, alpha: float, center_mode: str,
                     beta, loglik: float, info) -> tuple[float, np.ndarray, np.ndarray]:
    """Laplace proxy from a fitted point.

    ``mode``: full Laplace expansion of ``alpha*l + log phi`` at its maximizer.
    ``mle``: expansion of ``alpha*l`` at the MLE with the slab evaluated there.
    Returns ``(log Q, mean, precision)``.
    """
    p = beta.size
    if p == 0:
        return alpha * loglik, np.zeros(0), np.zeros((0, 0))
    log_phi = log_slab_density(prior, support, beta)
    if center_mode == "mode":
        _, Hs = log_slab_grad_hess(prior, support, beta)
        H = alpha * info - Hs
        H = 0.5 * (H + H.T)
        L = _chol_or_raise(H, support)
        logq = alpha * loglik + log_phi + 0.5 * p * LOG_2PI - 0.5 * _logdet_chol(L)
        return logq, beta, H
    F = 0.5 * (info + info.T)
    L = _chol_or_raise(F, support)
    logq = (alpha * loglik + log_phi + 0.5 * p * (LOG_2PI - math.log(alpha)) - 0.5 * _logdet_chol(L))
    return logq, beta, alpha * F


def integration_precision(prior: SasPrior, support, alpha: float, precision, info) -> np.ndarray:
    """Scale matrix for quadrature and importance proposals.

    For the Laplace slab the curvature at the mode is meaningless near the
    kink at zero, so the slab enters through its per-coordinate variance
    ``(m + 1) / lam**2`` instead.
    """
    if prior.slab.gaussian:
        return precision
    d = np.concatenate([np.full(prior.group_sizes[g], prior.slab.lam**2 / (prior.group_sizes[g] + 1))
                        for g in support])
    M = alpha * np.asarray(info, dtype=float) + np.diag(d)
    return 0.5 * (M + M.T)


def _mode_fit_python(model: RestrictedModel, prior: SasPrior, alpha: float, init=None):
    """Maximizer of ``alpha*l + log phi`` for slabs without a kernel path."""
    p = model.p

    def objective(b):
        l, g, H = loglik_grad_hess(model, b)
        lp = log_slab_density(prior, model.support, b)
        gp, Hp = log_slab_grad_hess(prior, model.support, b)
        return alpha * l + lp, alpha * g + gp, alpha * H - Hp

    def fisher(b):
        eta = model.xs @ b
        w = np.asarray(model.family.fisher_weight(eta, model.tau))
        return alpha * (model.xs.T @ (w[:, None] * model.xs)) + 1e-12 * np.eye(p)

    x0 = np.full(p, 1e-3) if init is None else np.asarray(init, dtype=float)
    # keep blocks away from the Laplace kink at zero when starting
    x0 = np.where(x0 == 0.0, 1e-3, x0)
    b, f, g, H, status, it, _ = newton_maximize(objective, x0, fallback_hess=fisher)
    l, _, info = loglik_grad_hess(model, b)
    return b, l, info, status


# ---------------------------------------------------------------------------
# batched fitting
# ---------------------------------------------------------------------------

def _cols_matrix(design, supports):
    pmax = max((design.p_support(s) for s in supports), default=0)
    cols = np.full((len(supports), max(pmax, 1)), -1, dtype=np.int64)
    for j, s in enumerate(supports):
        c = design.columns(s)
        cols[j, : c.size] = c
    return cols


def _parents(supports):
    index = {s: j for j, s in enumerate(supports)}
    return np.array([index.get(s[:-1], -1) if s else -1 for s in supports], dtype=np.int64)


@dataclass
class BatchFit:
    supports: list
    beta: list
    loglik: np.ndarray
    info: list
    status: np.ndarray


def fit_batch(dataset: Dataset, supports: Sequence, alpha: float = 1.0, prior_prec: float = 0.0,
              tau=None) -> BatchFit:
    """Maximize ``alpha*l_S - prior_prec |b|^2/2`` on every support.

    The Gaussian family uses Gram sufficient statistics; other families go
    through the compiled (or fallback) kernel with warm starts from each
    support's lexicographic parent.
    """
    supports = list(supports)
    design = dataset.design
    tau = dataset.tau if tau is None else tau
    fam = dataset.family
    if fam.kind == "gaussian":
        Xt = design.x / tau[:, None]
        A = design.x.T @ Xt
        bvec = Xt.T @ dataset.y
        base = -0.0
        betas, lls, infos = [None] * len(supports), np.zeros(len(supports)), [None] * len(supports)
        by_dim: dict[int, list] = {}
        for j, s in enumerate(supports):
            by_dim.setdefault(design.p_support(s), []).append(j)
        for p, idxs in by_dim.items():
            if p == 0:
                for j in idxs:
                    betas[j], lls[j], infos[j] = np.zeros(0), base, np.zeros((0, 0))
                continue
            cols = np.stack([design.columns(supports[j]) for j in idxs])
            As = A[cols[:, :, None], cols[:, None, :]]
            bs = bvec[cols]
            H = alpha * As + prior_prec * np.eye(p)[None]
            sol = np.linalg.solve(H, alpha * bs[..., None])[..., 0]
            ll = np.einsum("ki,ki->k", sol, bs) - 0.5 * np.einsum("ki,kij,kj->k", sol, As, sol)
            for k, j in enumerate(idxs):
                betas[j], lls[j], infos[j] = sol[k], float(ll[k]), As[k]
        return BatchFit(supports, betas, lls, infos, np.zeros(len(supports), dtype=np.int64))
    cols = _cols_matrix(design, supports)
    parent = _parents(supports)
    beta, ll, info, status, _ = kernels.fit_supports(
        design.x, dataset.y, tau, fam.code, fam.size_r or 0.0, cols, parent,
        alpha=alpha, prior_prec=prior_prec)
    betas, infos = [], []
    for j, s in enumerate(supports):
        p = design.p_support(s)
        betas.append(beta[j, :p].copy())
        infos.append(info[j, :p, :p].copy())
    return BatchFit(supports, betas, ll, infos, status)


# ---------------------------------------------------------------------------
# exact integration
# ---------------------------------------------------------------------------

@dataclass
class ExactBudget:
    gh_tol: float = 1e-8
    gh_levels: tuple = (4, 6, 8, 12, 16, 24, 32)
    max_gh_dim: int = 3
    is_draws: int = 200_000
    min_ess: float = 100.0
    seed: int = 0
    force: str | None = None  # "gh" or "importance"


def _support_seed(seed: int, support) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, len(support), *support]))


def _log_integrand_fn(dataset: Dataset, prior: SasPrior, support, alpha: float, tau) -> Callable:
    design = dataset.design
    cols = design.columns(support)
    fam = dataset.family

    def logf(B):
        B = np.ascontiguousarray(np.atleast_2d(B), dtype=float)
        ll = kernels.loglik_points(design.x, dataset.y, tau, fam.code, fam.size_r or 0.0, cols, B)
        return alpha * ll + _slab_logpdf_batch(prior, support, B)

    return logf


def _gh_grid(p: int, level: int):
    z1, w1 = hermgauss(level)
    grids = np.meshgrid(*([z1] * p), indexing="ij")
    Z = np.stack([g.ravel() for g in grids], axis=1)
    lw = np.zeros(Z.shape[0])
    for k, g in enumerate(np.meshgrid(*([np.log(w1)] * p), indexing="ij")):
        lw += g.ravel()
    return Z, lw


def integrate_log(logf: Callable, center, H, budget: ExactBudget, support=()) -> MarginalEstimate:
    """``log int exp(logf)`` by adaptive Gauss-Hermite or importance sampling."""
    center = np.asarray(center, dtype=float)
    p = center.size
    if p == 0:
        v = float(logf(np.zeros((1, 0)))[0])
        return MarginalEstimate(tuple(support), v, v, "none", 0.0)
    L = _chol_or_raise(0.5 * (H + H.T), support)
    C = np.linalg.inv(L).T  # C C^T = H^{-1}
    half_logdet = float(np.sum(np.log(np.diag(L))))
    use_gh = p <= budget.max_gh_dim if budget.force is None else budget.force == "gh"
    if use_gh:
        prev, val, level = None, None, 0
        for level in budget.gh_levels:
            Z, lw = _gh_grid(p, level)
            B = center + math.sqrt(2.0) * Z @ C.T
            terms = lw + np.sum(Z * Z, axis=1) + logf(B)
            prev, val = val, 0.5 * p * math.log(2.0) - half_logdet + float(special.logsumexp(terms))
            if prev is not None and abs(val - prev) <= budget.gh_tol:
                return MarginalEstimate(tuple(support), math.nan, val, "gauss_hermite", abs(val - prev), level)
        if budget.force == "gh":
            err = abs(val - prev) if prev is not None else math.inf
            return MarginalEstimate(tuple(support), math.nan, val, "gauss_hermite", err, level,
                                    unreliable=True)
        # ladder stalled (typically a kinked integrand): heavy-tailed importance sampling
        return _importance(logf, center, C, half_logdet, budget, support, df=T_DF)
    return _importance(logf, center, C, half_logdet, budget, support)


def _importance(logf, center, C, half_logdet, budget, support, df=None) -> MarginalEstimate:
    p = center.size
    rng = _support_seed(budget.seed, support)
    Z = rng.standard_normal((budget.is_draws, p))
    if df is None:
        B = center + Z @ C.T
        logq = -0.5 * p * LOG_2PI + half_logdet - 0.5 * np.sum(Z * Z, axis=1)
        method = "importance"
    else:
        chi = rng.chisquare(df, budget.is_draws)
        Zt = Z * np.sqrt(df / chi)[:, None]
        B = center + Zt @ C.T
        logq = stats.multivariate_t.logpdf(Zt, loc=np.zeros(p), shape=np.eye(p), df=df) + half_logdet
        method = "importance_t"
    lw = logf(B) - logq
    m = float(lw.max())
    r = np.exp(lw - m)
    mean_r = float(r.mean())
    val = m + math.log(mean_r)
    se = float(r.std(ddof=1) / (mean_r * math.sqrt(r.size)))
    ess = float(r.sum() ** 2 / np.sum(r * r))
    return MarginalEstimate(tuple(support), math.nan, val, method, se, 0, r.size, ess,
                            unreliable=ess < budget.min_ess)


def _mode_point(dataset, prior, support, alpha, tau):
    """Mode of ``alpha*l + log phi`` with its curvature and log-likelihood."""
    model = RestrictedModel(dataset.family, dataset.design, tau, support, dataset.y)
    if prior.slab.gaussian:
        fit = fit_batch(dataset, [support], alpha, 1.0 / prior.slab.sigma2, tau=tau)
        return fit.beta[0], float(fit.loglik[0]), fit.info[0], int(fit.status[0])
    b, l, info, status = _mode_fit_python(model, prior, alpha)
    return b, l, info, status


# ---------------------------------------------------------------------------
# public single-support operations
# ---------------------------------------------------------------------------

def laplace_log_marginal(model: RestrictedModel, prior: SasPrior, alpha: float,
                         center_mode: str = "auto", truth=None) -> float:
    """Laplace proxy ``log Q`` for one support (carrier-free likelihood)."""
    ds = Dataset(model.family, model.design, model.tau, model.y, truth)
    return _laplace_one(ds, prior, model.support, alpha, resolve_center_mode(center_mode, prior),
                        model.tau)[0]


def _laplace_one(ds: Dataset, prior, support, alpha, mode, tau):
    if not support:
        ll = float(np.sum(ds.family.loglik_terms(ds.y, np.zeros(ds.n), tau)[0]))
        return alpha * ll, np.zeros(0), np.zeros((0, 0)), ()
    if mode == "mode":
        b, l, info, st = _mode_point(ds, prior, support, alpha, tau)
        q, m, P = laplace_from_fit(prior, support, alpha, "mode", b, l, info)
        return q, m, P, _flags(st)
    if mode == "mle":
        fit = fit_batch(ds, [support], 1.0, 0.0, tau=tau)
        q, m, P = laplace_from_fit(prior, support, alpha, "mle", fit.beta[0], float(fit.loglik[0]), fit.info[0])
        return q, m, P, _flags(int(fit.status[0]))
    if mode == "score_quadratic":
        if ds.truth is None:
            raise ValueError("score_quadratic mode needs the truth")
        q, m, P = _score_quadratic_one(ds, prior, support, alpha, tau)
        return q, m, P, ()
    raise ValueError(f"unknown center mode {mode!r}")


def _score_quadratic_one(ds: Dataset, prior, support, alpha, tau):
    center = pseudo_true_center(ds.family, ds.design, tau, support, ds.truth)
    model = RestrictedModel(ds.family, ds.design, tau, support, ds.y)
    l, g, _ = loglik_grad_hess(model, center.beta_circ)
    F = center.fisher_circ
    L = _chol_or_raise(F, support)
    u = np.linalg.solve(L, g)
    p = g.size
    logq = (alpha * l + 0.5 * alpha * float(u @ u) + 0.5 * p * (LOG_2PI - math.log(alpha))
            - 0.5 * _logdet_chol(L) + log_slab_density(prior, support, center.beta_circ))
    mean = center.beta_circ + np.linalg.solve(L.T, u)
    return logq, mean, alpha * F


def _flags(status: int) -> tuple:
    return () if status == STATUS_OK else (STATUS_NAMES[status],)


def exact_log_marginal(model: RestrictedModel, prior: SasPrior, alpha: float,
                       method_budget: ExactBudget | None = None) -> MarginalEstimate:
    """``log int exp(alpha*l_S) phi_S`` with an error estimate."""
    budget = method_budget or ExactBudget()
    ds = Dataset(model.family, model.design, model.tau, model.y)
    sup = model.support
    if not sup:
        v = alpha * float(np.sum(ds.family.loglik_terms(ds.y, np.zeros(ds.n), model.tau)[0]))
        return MarginalEstimate(sup, v, v, "none", 0.0)
    b, l, info, _ = _mode_point(ds, prior, sup, alpha, model.tau)
    q, _, H = laplace_from_fit(prior, sup, alpha, "mode", b, l, info)
    H = integration_precision(prior, sup, alpha, H, info)
    est = integrate_log(_log_integrand_fn(ds, prior, sup, alpha, model.tau), b, H, budget, sup)
    est.log_laplace = q
    return est


# ---------------------------------------------------------------------------
# support posterior
# ---------------------------------------------------------------------------

def support_posterior(dataset: Dataset, prior: SasPrior, alpha: float, s_max: int,
                      mode: str = "laplace", center_mode: str = "auto",
                      loglik_scale: float = 1.0, budget: ExactBudget | None = None,
                      cap: int = DEFAULT_ENUMERATION_CAP, supports: Sequence | None = None,
                      keep_exact_density: bool = True,
                      exact_screen: float | None = None) -> SupportPosterior:
    """Fractional posterior over all supports with at most ``s_max`` groups.

    ``loglik_scale`` multiplies the log-likelihood (implemented by dividing
    the dispersions), which makes the identity between tempering and
    likelihood rescaling directly checkable.

    With ``mode="exact"`` and ``exact_screen`` set, supports whose Laplace
    weight is below the threshold keep their Laplace marginal; their total
    Laplace mass is stored in ``meta["screened_mass"]``.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if mode not in ("exact", "laplace"):
        raise ValueError("mode must be 'exact' or 'laplace'")
    design = dataset.design
    if prior.G != design.G:
        raise ValueError("prior and design disagree on the number of groups")
    tau = dataset.tau / float(loglik_scale)
    if supports is None:
        supports = enumerate_supports(design.G, s_max, cap=cap)
    supports = sorted(tuple(s) for s in supports)
    budget = budget or ExactBudget()
    cmode = "mode" if mode == "exact" else resolve_center_mode(center_mode, prior)
    ll0 = float(np.sum(dataset.family.loglik_terms(dataset.y, np.zeros(dataset.n), tau)[0]))

    nonempty = [s for s in supports if s]
    fits = None
    if cmode == "mode" and prior.slab.gaussian:
        fits = fit_batch(dataset, nonempty, alpha, 1.0 / prior.slab.sigma2, tau=tau)
    elif cmode == "mle":
        fits = fit_batch(dataset, nonempty, 1.0, 0.0, tau=tau)

    def one(j):
        s = nonempty[j]
        info = None
        if fits is not None:
            b, l, info, st = fits.beta[j], float(fits.loglik[j]), fits.info[j], int(fits.status[j])
            q, mean, P = laplace_from_fit(prior, s, alpha, cmode, b, l, info)
            flags = _flags(st)
        elif cmode == "mode":
            model = RestrictedModel(dataset.family, design, tau, s, dataset.y)
            b, l, info, st = _mode_fit_python(model, prior, alpha)
            q, mean, P = laplace_from_fit(prior, s, alpha, "mode", b, l, info)
            flags = _flags(st)
        else:
            q, mean, P = _score_quadratic_one(dataset, prior, s, alpha, tau)
            flags = ()
        if mode == "laplace":
            return SupportEntry(s, 0.0, mean, P, q, f"laplace_{cmode}", 0.0, flags)
        logf = _log_integrand_fn(dataset, prior, s, alpha, tau)
        est = integrate_log(logf, mean, integration_precision(prior, s, alpha, P, info), budget, s)
        flags = flags + (("unreliable",) if est.unreliable else ())
        method = f"{est.exact_method}_{est.level}" if est.exact_method == "gauss_hermite" else est.exact_method
        entry = SupportEntry(s, 0.0, mean, P, est.log_exact, method, est.exact_se, flags)
        if keep_exact_density:
            lz = est.log_exact
            entry.log_density = lambda B, logf=logf, lz=lz: logf(B) - lz
        return entry

    todo = list(range(len(nonempty)))
    screened_mass, lap_entries = 0.0, {}
    if mode == "exact" and exact_screen is not None:
        lap = support_posterior(dataset, prior, alpha, s_max, mode="laplace", center_mode="mode",
                                loglik_scale=loglik_scale, cap=cap, supports=supports)
        keep = []
        for j, s in enumerate(nonempty):
            e = lap.entry(s)
            if math.exp(e.log_weight) >= exact_screen:
                keep.append(j)
            else:
                screened_mass += math.exp(e.log_weight)
                lap_entries[j] = SupportEntry(s, 0.0, e.mean, e.precision, e.log_marginal,
                                              "laplace_mode", 0.0, e.flags + ("screened",))
        todo = keep
    done = dict(zip(todo, parallel_map(one, todo)))
    done.update(lap_entries)
    entries = [done[j] for j in range(len(nonempty))]
    if () in supports:
        entries.append(SupportEntry((), 0.0, np.zeros(0), np.zeros((0, 0)), alpha * ll0,
                                    "empty", 0.0))
    for e in entries:
        e.log_weight = prior.log_support_mass(e.support) + e.log_marginal
    entries = normalize_entries(entries)
    meta = {"s_max": int(s_max), "center_mode": cmode, "loglik_scale": float(loglik_scale),
            "n_supports": len(entries)}
    if exact_screen is not None and mode == "exact":
        meta.update(exact_screen=float(exact_screen), screened_mass=screened_mass,
                    n_screened=len(lap_entries))
    return SupportPosterior(float(alpha), entries, design.group_sizes, mode, True, meta)


# ---------------------------------------------------------------------------
# mixture and oracle
# ---------------------------------------------------------------------------

@dataclass
class OracleLaw:
    support: tuple
    mean: np.ndarray
    covariance: np.ndarray
    alpha: float

    @property
    def precision(self) -> np.ndarray:
        P = np.linalg.inv(self.covariance)
        return 0.5 * (P + P.T)

    def as_posterior(self, group_sizes) -> SupportPosterior:
        e = SupportEntry(self.support, 0.0, self.mean.copy(), self.precision, 0.0, "oracle")
        return SupportPosterior(self.alpha, [e], tuple(group_sizes), "oracle")


def _truth_fisher_and_score(dataset: Dataset):
    w = dataset.truth_weights()
    F = dataset.design.x.T @ (w[:, None] * dataset.design.x)
    return F, dataset.truth_score()


def mixture_weights(dataset: Dataset, prior: SasPrior, alpha: float, truth=None,
                    s_max: int | None = None, k_dim: int = 3,
                    cap: int = DEFAULT_ENUMERATION_CAP) -> SupportPosterior:
    """Quadratic-score Gaussian mixture over sparse supersets of the true support."""
    if truth is not None:
        dataset = Dataset(dataset.family, dataset.design, dataset.tau, dataset.y, truth,
                          dataset.provenance)
    if dataset.truth is None:
        raise ValueError("mixture weights need the truth")
    s0 = tuple(dataset.truth.support)
    if not s0:
        raise ValueError("mixture weights need a nonempty true support")
    design = dataset.design
    max_size = k_dim * len(s0)
    if s_max is not None:
        max_size = min(max_size, s_max)
    supports = supersets_of(s0, design.G, max_size, cap=cap)
    F, delta = _truth_fisher_and_score(dataset)
    beta0 = dataset.beta0()
    by_dim: dict[int, list] = {}
    for s in supports:
        by_dim.setdefault(design.p_support(s), []).append(s)
    entries = []
    for p, sups in by_dim.items():
        cols = np.stack([design.columns(s) for s in sups])
        Fs = F[cols[:, :, None], cols[:, None, :]]
        try:
            L = np.linalg.cholesky(Fs)
        except np.linalg.LinAlgError:
            for k, s in enumerate(sups):
                _chol_or_raise(Fs[k], s)
            raise
        d = delta[cols]
        u = np.linalg.solve(L, d[..., None])[..., 0]
        shift = np.linalg.solve(np.swapaxes(L, 1, 2), u[..., None])[..., 0]
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
        quad = np.sum(u * u, axis=1)
        B0 = beta0[cols]
        if prior.slab.gaussian:
            slab = _slab_logpdf_batch(prior, sups[0], B0)
        else:
            slab = [log_slab_density(prior, s, B0[k]) for k, s in enumerate(sups)]
        for k, s in enumerate(sups):
            b0 = B0[k]
            lw = (prior.log_support_mass(s) + slab[k]
                  + 0.5 * p * (LOG_2PI - math.log(alpha)) - 0.5 * logdet[k] + 0.5 * alpha * quad[k])
            entries.append(SupportEntry(s, lw, b0 + shift[k], alpha * Fs[k], lw, "mixture"))
    entries = normalize_entries(entries)
    meta = {"true_support": list(s0), "max_size": int(max_size), "k_dim": int(k_dim)}
    return SupportPosterior(float(alpha), entries, design.group_sizes, "mixture", True, meta)


def oracle_law(dataset: Dataset, truth=None, alpha: float = 1.0) -> OracleLaw:
    if truth is not None:
        dataset = Dataset(dataset.family, dataset.design, dataset.tau, dataset.y, truth)
    if dataset.truth is None or not dataset.truth.support:
        raise ValueError("oracle law needs a nonempty true support")
    s0 = tuple(dataset.truth.support)
    F, delta = _truth_fisher_and_score(dataset)
    cols = dataset.design.columns(s0)
    F0 = F[np.ix_(cols, cols)]
    L = _chol_or_raise(F0, s0)
    shift = np.linalg.solve(L.T, np.linalg.solve(L, delta[cols]))
    cov = np.linalg.inv(alpha * F0)
    return OracleLaw(s0, dataset.truth.values + shift, 0.5 * (cov + cov.T), float(alpha))


def posterior_mode_support(sp: SupportPosterior) -> tuple:
    """Highest-weight support; exact ties go to the lexicographically first."""
    lw = sp.log_weights()
    return sp.entries[int(np.argmax(lw))].support


@dataclass
class PosteriorDraws:
    draws: np.ndarray
    supports: list
    flagged: bool = False
    acceptance: float = 1.0


def sample_posterior(sp: SupportPosterior, k: int, rng, pilot: int = 2000,
                     margin: float = 1.1) -> PosteriorDraws:
    """Ambient draws from the posterior with their support labels.

    Gaussian summaries are sampled directly.  Entries that carry an exact
    log density are sampled by rejection from their Gaussian summary, with
    the envelope constant estimated from pilot draws.
    """
    rng = np.random.default_rng(rng)
    w = sp.weights()
    w = w / w.sum()
    idx = rng.choice(len(sp.entries), size=k, p=w)
    out = np.zeros((k, sp.p))
    labels = [sp.entries[i].support for i in idx]
    flagged = False
    tried = accepted = 0
    for i in np.unique(idx):
        e = sp.entries[i]
        rows = np.flatnonzero(idx == i)
        if e.p == 0:
            continue
        cols = sp.columns(e.support)
        L = e.chol_precision()
        if e.log_density is None:
            out[np.ix_(rows, cols)] = gaussian_draws(e.mean, L, rows.size, rng)
            continue
        P = gaussian_draws(e.mean, L, pilot, rng)
        lr = e.log_density(P) - gaussian_logpdf(P, e.mean, L)
        spread = float(lr.max() - lr.min())
        log_m = float(lr.max()) + (math.log(margin) if spread > 1e-10 else 0.0)
        got = []
        need = rows.size
        while len(got) < need:
            B = gaussian_draws(e.mean, L, max(64, 2 * (need - len(got))), rng)
            r = e.log_density(B) - gaussian_logpdf(B, e.mean, L) - log_m
            if np.any(r > 1e-12):
                flagged = True
            keep = np.log(rng.random(B.shape[0])) <= r
            tried += B.shape[0]
            accepted += int(keep.sum())
            got.extend(B[keep])
            if tried > 1000 and accepted / tried < 1e-3:
                flagged = True
                break
        got = np.array(got[:need]) if got else np.zeros((0, e.p))
        out[np.ix_(rows[: len(got)], cols)] = got
    acc = accepted / tried if tried else 1.0
    return PosteriorDraws(out, labels, flagged, acc)
