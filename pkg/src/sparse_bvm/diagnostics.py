"""Finite-sample checks of the posterior approximation chain.

Every experiment takes explicit seeds; replicate streams are spawned from a
single ``SeedSequence`` so results do not depend on execution order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate, optimize, stats

from .dataset import Dataset
from .design import (EnumerationBudgetError, GroupedDesign, PaddedVector, SingularBlockError,
                     compatibility_phi1, compatibility_phi2, enumerate_supports, parallel_map,
                     sparse_gram_extremes, sparse_influence_leverage, sparse_row_envelope)
from .family import GlmFamily
from .posterior import (OracleLaw, SupportEntry, SupportPosterior, gaussian_draws, gaussian_logpdf,
                        mixture_weights, posterior_mode_support, sample_posterior,
                        support_posterior)
from .prior import SasPrior, audit_prior_constants
from .restricted import as_dispersion, pseudo_true_center, restricted_mle, sym_inv_sqrt

KAPPA0 = 3.0 + math.log(5.0)


def eps_n(s0: int, G: int, n: int) -> float:
    return math.sqrt(s0 * math.log(G) / n)


def replicate_rngs(seed: int, count: int) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def simulate_response(family: GlmFamily, eta0, tau, rng) -> np.ndarray:
    return np.asarray(family.sample(eta0, tau, rng), dtype=float)


# ---------------------------------------------------------------------------
# total variation
# ---------------------------------------------------------------------------

@dataclass
class TvEstimate:
    value: float
    se: float
    method: str
    singular_mass: float = 0.0
    negligible_bound: float = 0.0
    per_support: dict = field(default_factory=dict)


def _tv_shared_quadrature(ea: SupportEntry, eb: SupportEntry, wa: float, wb: float) -> float:
    ma = float(ea.mean[0])
    mb = float(eb.mean[0])
    sa = 1.0 / math.sqrt(float(ea.precision[0, 0]))
    sb = 1.0 / math.sqrt(float(eb.precision[0, 0]))
    lo = min(ma - 12 * sa, mb - 12 * sb)
    hi = max(ma + 12 * sa, mb + 12 * sb)

    def integrand(x):
        B = np.array([[x]])
        return abs(wa * math.exp(ea.logpdf(B)[0]) - wb * math.exp(eb.logpdf(B)[0]))

    pts = sorted({ma, mb, 0.5 * (ma + mb)})
    val, _ = integrate.quad(integrand, lo, hi, points=pts, limit=400, epsabs=1e-12, epsrel=1e-10)
    return 0.5 * val


def _tv_shared_mc(ea: SupportEntry, eb: SupportEntry, wa: float, wb: float, mc: int,
                  rng: np.random.Generator) -> tuple[float, float]:
    La, Lb = ea.chol_precision(), eb.chol_precision()
    k = mc // 2
    B = np.vstack([gaussian_draws(ea.mean, La, k, rng), gaussian_draws(eb.mean, Lb, mc - k, rng)])
    lqa = gaussian_logpdf(B, ea.mean, La)
    lqb = gaussian_logpdf(B, eb.mean, Lb)
    lq = np.logaddexp(lqa, lqb) - math.log(2.0)
    fa = ea.logpdf(B) if ea.log_density is not None else lqa
    fb = eb.logpdf(B) if eb.log_density is not None else lqb
    r = np.abs(wa * np.exp(fa - lq) - wb * np.exp(fb - lq))
    return 0.5 * float(r.mean()), 0.5 * float(r.std(ddof=1) / math.sqrt(r.size))


def tv_between_support_mixtures(a: SupportPosterior, b: SupportPosterior, mc: int = 40_000,
                                seed: int = 0, negligible: float = 1e-6) -> TvEstimate:
    """Total variation between two laws on the sparse coefficient space.

    Laws on different supports are mutually singular, so only shared supports
    need integration; everything else contributes half its mass exactly.
    """
    if tuple(a.group_sizes) != tuple(b.group_sizes):
        raise ValueError("posteriors live on different ambient spaces")
    sup_a = {e.support: e for e in a.entries}
    sup_b = {e.support: e for e in b.entries}
    singular = 0.5 * (sum(math.exp(e.log_weight) for s, e in sup_a.items() if s not in sup_b)
                      + sum(math.exp(e.log_weight) for s, e in sup_b.items() if s not in sup_a))
    total, var, neg_bound = singular, 0.0, 0.0
    used_quad = used_mc = False
    per = {}
    rng = np.random.default_rng(seed)
    for s in sorted(set(sup_a) & set(sup_b)):
        ea, eb = sup_a[s], sup_b[s]
        wa, wb = math.exp(ea.log_weight), math.exp(eb.log_weight)
        if ea.p == 0:
            term, se = 0.5 * abs(wa - wb), 0.0
        elif max(wa, wb) < negligible:
            term, se = 0.5 * abs(wa - wb), 0.0
            neg_bound += min(wa, wb)
        elif ea.p == 1:
            term, se = _tv_shared_quadrature(ea, eb, wa, wb), 0.0
            used_quad = True
        else:
            term, se = _tv_shared_mc(ea, eb, wa, wb, mc, rng)
            used_mc = True
        per[s] = (term, se)
        total += term
        var += se * se
    method = "mc" if used_mc else ("per_support_quadrature" if used_quad else "exact_singular_sum")
    value = min(1.0, max(0.0, total))
    return TvEstimate(value, math.sqrt(var), method, singular, neg_bound, per)


def tv_mixture_vs_oracle(mix: SupportPosterior, oracle: OracleLaw, tol: float = 1e-10,
                         **fallback) -> float:
    """``1 - omega_{S0}`` when the oracle matches the mixture's true-support component."""
    e = mix.entry(oracle.support)
    if e is not None:
        scale = max(1.0, float(np.abs(e.precision).max()))
        if (np.allclose(e.mean, oracle.mean, rtol=0, atol=tol * max(1.0, np.abs(oracle.mean).max()))
                and np.allclose(e.precision, oracle.precision, rtol=0, atol=tol * scale * 1e3)):
            return float(max(0.0, 1.0 - math.exp(e.log_weight)))
    return tv_between_support_mixtures(mix, oracle.as_posterior(mix.group_sizes), **fallback).value


# ---------------------------------------------------------------------------
# credible sets
# ---------------------------------------------------------------------------

@dataclass
class CredibleSet:
    kind: str
    support: tuple
    center: np.ndarray
    precision: np.ndarray
    level: float
    chi2_quantile: float
    group_sizes: tuple
    fallback: bool = False

    def columns(self) -> np.ndarray:
        off = np.concatenate([[0], np.cumsum(self.group_sizes)]).astype(int)
        if not self.support:
            return np.zeros(0, dtype=int)
        return np.concatenate([np.arange(off[g], off[g + 1]) for g in self.support])


def _quantile(p: int, level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    return 0.0 if p == 0 else float(stats.chi2.ppf(level, p))


def credible_set(kind: str, support, center, precision, level: float, group_sizes) -> CredibleSet:
    support = tuple(support)
    center = np.asarray(center, dtype=float)
    P = np.asarray(precision, dtype=float).reshape(center.size, center.size)
    return CredibleSet(kind, support, center, P, level, _quantile(center.size, level),
                       tuple(group_sizes))


def oracle_credible_set(oracle: OracleLaw, level: float, group_sizes) -> CredibleSet:
    return credible_set("oracle", oracle.support, oracle.mean, oracle.precision, level, group_sizes)


def plugin_credible_set(support, beta_check, info, alpha: float, level: float,
                        group_sizes) -> CredibleSet:
    """Ellipsoid around the restricted maximizer with precision ``alpha * info``.

    Falls back to ``alpha * I`` centered at zero when the information is not
    positive definite.
    """
    support = tuple(support)
    p = int(np.asarray(beta_check).size)
    info = np.asarray(info, dtype=float).reshape(p, p)
    pd = p == 0
    if p:
        try:
            np.linalg.cholesky(0.5 * (info + info.T))
            pd = True
        except np.linalg.LinAlgError:
            pd = False
    if pd:
        cs = credible_set("plugin", support, beta_check, alpha * 0.5 * (info + info.T), level, group_sizes)
    else:
        cs = credible_set("plugin", support, np.zeros(p), alpha * np.eye(p), level, group_sizes)
        cs.fallback = True
    return cs


def contains(cs: CredibleSet, beta) -> bool:
    beta = np.asarray(beta, dtype=float).ravel()
    cols = cs.columns()
    mask = np.ones(beta.size, dtype=bool)
    mask[cols] = False
    if np.any(beta[mask] != 0.0):
        return False
    d = beta[cols] - cs.center
    return bool(d @ cs.precision @ d <= cs.chi2_quantile)


def posterior_set_mass(sp: SupportPosterior, cs: CredibleSet, mc: int = 4000, seed: int = 0,
                       negligible: float = 1e-12) -> float:
    """``Pi(C | Y)`` for a support mixture: sum over components with support inside the set's."""
    rng = np.random.default_rng(seed)
    target = set(cs.support)
    cols_cs = cs.columns()
    pos = {c: k for k, c in enumerate(cols_cs)}
    total = 0.0
    for e in sp.entries:
        if not set(e.support) <= target:
            continue
        w = math.exp(e.log_weight)
        if w < negligible:
            continue
        if e.p == 0:
            inside = float(cs.center.size == 0 or float(cs.center @ cs.precision @ cs.center) <= cs.chi2_quantile)
            total += w * inside
            continue
        draws = gaussian_draws(e.mean, e.chol_precision(), mc, rng)
        full = np.zeros((mc, cols_cs.size))
        idx = [pos[c] for c in sp.columns(e.support)]
        full[:, idx] = draws
        d = full - cs.center
        q = np.einsum("ki,ij,kj->k", d, cs.precision, d)
        total += w * float(np.mean(q <= cs.chi2_quantile))
    return total


# ---------------------------------------------------------------------------
# coverage and recovery experiments
# ---------------------------------------------------------------------------

@dataclass
class CoverageResult:
    coverage: float
    se: float
    credibility_gap: float
    gap_se: float
    replications: int
    used: int
    excluded: int
    selection_rate: float
    level: float


def coverage_experiment(family: GlmFamily, design: GroupedDesign, truth: PaddedVector, prior: SasPrior,
                        alpha: float, level: float, replications: int, seed: int, s_max: int,
                        tau=1.0, select: bool = True, posterior_mc: int = 2000) -> CoverageResult:
    """Frequentist coverage of the plug-in set and its posterior credibility."""
    if replications < 200:
        raise ValueError("coverage experiments need at least 200 replications")
    tau = as_dispersion(tau, design.n)
    beta0 = design.embed(truth)
    eta0 = design.x @ beta0
    s0 = tuple(truth.support)

    def one(args):
        k, rng = args
        y = simulate_response(family, eta0, tau, rng)
        ds = Dataset(family, design, tau, y, truth)
        sp = None
        if select:
            sp = support_posterior(ds, prior, alpha, s_max, mode="laplace")
            s_hat = posterior_mode_support(sp)
        else:
            s_hat = s0
        if not s_hat:
            cs = plugin_credible_set((), np.zeros(0), np.zeros((0, 0)), alpha, level, design.group_sizes)
            cred = posterior_set_mass(sp, cs, posterior_mc, seed=k) if sp is not None else 1.0
            return contains(cs, beta0), cred, True, s_hat == s0
        fit = restricted_mle(ds.model(s_hat))
        if fit.separated or not fit.converged:
            return None
        cs = plugin_credible_set(s_hat, fit.beta_hat, fit.observed_info, alpha, level, design.group_sizes)
        if sp is not None:
            cred = posterior_set_mass(sp, cs, posterior_mc, seed=k)
        else:
            cred = level
        return contains(cs, beta0), cred, True, s_hat == s0

    rngs = replicate_rngs(seed, replications)
    results = parallel_map(one, list(enumerate(rngs)))
    kept = [r for r in results if r is not None]
    cov = np.array([float(r[0]) for r in kept])
    gaps = np.array([abs(r[1] - level) for r in kept])
    sel = np.array([float(r[3]) for r in kept])
    m = len(kept)
    p_hat = float(cov.mean()) if m else math.nan
    return CoverageResult(p_hat, math.sqrt(max(level * (1 - level), 1e-300) / m) if m else math.nan,
                          float(gaps.mean()) if m else math.nan,
                          float(gaps.std(ddof=1) / math.sqrt(m)) if m > 1 else math.nan,
                          replications, m, replications - m, float(sel.mean()) if m else math.nan, level)


@dataclass
class TrendPoint:
    n: int
    metric: str
    value: float
    se: float


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()), math.nan
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def recovery_replicates(dataset: Dataset, prior: SasPrior, alpha: float, s_max: int, replications: int,
                        seed: int, k_dim: int = 3, metrics: Sequence[str] = ("recovery", "oracle_tv")
                        ) -> dict:
    """Per-replicate posterior recovery mass, mode indicator and ``1 - omega_{S0}``."""
    if dataset.truth is None or not dataset.truth.support:
        raise ValueError("support recovery needs a nonempty true support")
    s0 = tuple(dataset.truth.support)
    eta0 = dataset.eta0()
    out = {"post_mass": [], "mode_hit": [], "oracle_tv": []}

    def one(rng):
        y = simulate_response(dataset.family, eta0, dataset.tau, rng)
        ds = dataset.with_response(y)
        row = {}
        if "recovery" in metrics:
            sp = support_posterior(ds, prior, alpha, s_max, mode="laplace")
            row["post_mass"] = sp.weight_of(s0)
            row["mode_hit"] = float(posterior_mode_support(sp) == s0)
        if "oracle_tv" in metrics:
            mw = mixture_weights(ds, prior, alpha, k_dim=k_dim)
            row["oracle_tv"] = 1.0 - mw.weight_of(s0)
        return row

    for row in parallel_map(one, replicate_rngs(seed, replications)):
        for k, v in row.items():
            out[k].append(v)
    return {k: np.array(v) for k, v in out.items() if v}


def support_recovery_experiment(datasets: dict, prior_for, alpha: float, s_max: int, replications: int,
                                seed: int, k_dim: int = 3,
                                metrics: Sequence[str] = ("recovery", "oracle_tv")) -> list:
    """Curves over ``n``: ``datasets`` maps n to a Dataset carrying its truth."""
    points = []
    for j, n in enumerate(sorted(datasets)):
        ds = datasets[n]
        prior = prior_for(ds) if callable(prior_for) else prior_for
        res = recovery_replicates(ds, prior, alpha, s_max, replications, seed + 7919 * j, k_dim, metrics)
        for key, name in (("post_mass", "posterior_recovery"), ("mode_hit", "mode_recovery"),
                          ("oracle_tv", "tv_mixture_oracle")):
            if key in res:
                v, se = _mean_se(res[key])
                points.append(TrendPoint(int(n), name, v, se))
    return points


def trend_is_monotone(values, ses, increasing: bool = True, slack: float = 2.0) -> bool:
    """Monotone along the grid up to ``slack`` standard errors per step."""
    for k in range(len(values) - 1):
        d = values[k + 1] - values[k]
        if not increasing:
            d = -d
        if d < -slack * math.hypot(ses[k], ses[k + 1]):
            return False
    return True


# ---------------------------------------------------------------------------
# score envelope
# ---------------------------------------------------------------------------

@dataclass
class ScoreEnvelopeResult:
    exceedance: float
    se: float
    bound: float
    threshold: float
    k_sc: float
    b_mgf: float
    quantiles: dict
    replications: int
    chi2_union_bound: float | None = None
    per_support_check: float | None = None


def score_linear_maps(family: GlmFamily, design: GroupedDesign, tau, truth: PaddedVector, supports):
    """Stacked affine maps ``Z_S = A_S (y - mu_S)`` for each support."""
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (design.n,))
    rows, offsets, mus = [], [0], []
    for s in supports:
        c = pseudo_true_center(family, design, tau, s, truth)
        xs = design.sub(s)
        eta = xs @ c.beta_circ
        _, xi1, _ = family.link(eta)
        A = c.inv_sqrt() @ (xs.T * (np.asarray(xi1) / tau)[None, :])
        rows.append(A)
        offsets.append(offsets[-1] + A.shape[0])
        mus.append(np.asarray(family.mean(eta), dtype=float))
    return rows, np.array(offsets), mus


def estimate_b_mgf(family: GlmFamily, design: GroupedDesign, tau, truth: PaddedVector, supports,
                   window: float, n_dirs: int = 32, n_grid: int = 32, seed: int = 0,
                   maps=None) -> float:
    """``sup log E exp(lam u'Z_S) / lam^2`` over supports, unit directions and a lambda grid."""
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (design.n,))
    rows, _, mus = maps if maps is not None else score_linear_maps(family, design, tau, truth, supports)
    eta0 = design.x @ design.embed(truth)
    lams = window / n_grid * np.arange(1, n_grid + 1)
    lams = np.concatenate([-lams[::-1], lams])
    rng = np.random.default_rng(seed)
    best = 0.0
    for A, mu in zip(rows, mus):
        p = A.shape[0]
        U = rng.standard_normal((n_dirs, p))
        U = np.vstack([np.eye(p), U / np.linalg.norm(U, axis=1, keepdims=True)])
        a = U @ A  # dirs x n
        # log E exp(t (y - mu)) = K_i(t) - t mu, with K_i the exact cumulant function at the truth
        t = lams[:, None, None] * a[None, :, :]
        K = family.log_mgf(t, eta0[None, None, :], tau[None, None, :])
        val = np.sum(K - t * mu[None, None, :], axis=2)
        ratio = val / (lams[:, None] ** 2)
        finite = np.where(np.isfinite(ratio), ratio, np.inf)
        best = max(best, float(np.max(finite)))
    return best


def score_envelope_experiment(family: GlmFamily, design: GroupedDesign, truth: PaddedVector, s: int,
                              replications: int, seed: int, tau=1.0, b_mgf: float | None = None,
                              window: float | None = None, k_multiplier: float = 1.0,
                              batch: int = 1000) -> ScoreEnvelopeResult:
    """Empirical frequency of ``sup_S ||Z_S|| > K_sc sqrt(s log G)`` over ``|S| <= s``."""
    supports = [S for S in enumerate_supports(design.G, s) if S]
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (design.n,))
    maps = score_linear_maps(family, design, tau, truth, supports)
    rows, offsets, mus = maps
    G = design.G
    scale = math.sqrt(s * math.log(G))
    if window is None:
        window = 2.0 * scale
    if b_mgf is None:
        b_mgf = estimate_b_mgf(family, design, tau, truth, supports, window, seed=seed, maps=maps)
    k_sc = 4.0 * math.sqrt(b_mgf * KAPPA0) * k_multiplier
    thr = k_sc * scale
    M = np.vstack(rows)
    shift = np.concatenate([A @ mu for A, mu in zip(rows, mus)])
    eta0 = design.x @ design.embed(truth)
    rng = np.random.default_rng(seed)
    sups = np.empty(replications)
    done = 0
    while done < replications:
        k = min(batch, replications - done)
        Y = np.asarray(family.sample(np.broadcast_to(eta0, (k, design.n)), np.broadcast_to(tau, (k, design.n)),
                                     rng), dtype=float)
        Z = Y @ M.T - shift[None, :]
        sq = Z * Z
        norms = np.sqrt(np.add.reduceat(sq, offsets[:-1], axis=1))
        sups[done:done + k] = norms.max(axis=1)
        done += k
    exc = float(np.mean(sups > thr))
    se = math.sqrt(max(exc * (1 - exc), 1.0 / replications**2) / replications)
    qs = {str(q): float(np.quantile(sups, q)) for q in (0.5, 0.9, 0.99, 0.999)}
    res = ScoreEnvelopeResult(exc, se, 2.0 * G ** (-2.0 * s), thr, k_sc, b_mgf, qs, replications)
    if family.kind == "gaussian":
        dims = np.diff(offsets)
        res.chi2_union_bound = float(min(1.0, np.sum(stats.chi2.sf(thr**2, dims))))
        # ||Z_S||^2 is chi2_p exactly iff Cov(Z_S) = I; report the worst entrywise deviation
        dev = 0.0
        for A in rows:
            cov = (A * tau[None, :]) @ A.T
            dev = max(dev, float(np.max(np.abs(cov - np.eye(A.shape[0])))))
        res.per_support_check = dev
    return res


# ---------------------------------------------------------------------------
# Renyi separation
# ---------------------------------------------------------------------------

@dataclass
class RenyiEntry:
    support: tuple
    p: int
    R: float
    nR: float
    beta: list
    flagged: bool = False
    grid_R: float | None = None
    opt_R: float | None = None


@dataclass
class RenyiTable:
    n: int
    alpha: float
    entries: list
    summability: float
    c_r: float

    def min_R(self) -> float:
        return min((e.R for e in self.entries), default=math.inf)


def _renyi_objective(family, xs, eta0, tau, alpha, n):
    b0 = family._cumulant_value(family._link(eta0)[0])

    def f(b):
        val, d = family.renyi_gap_with_deta(alpha, xs @ b, eta0, tau, b0)
        return val / n, xs.T @ d / n
    return f


def renyi_minimize(family: GlmFamily, design: GroupedDesign, tau, truth: PaddedVector, support,
                   alpha: float, restarts: int = 16, seed: int = 0) -> RenyiEntry:
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (design.n,))
    eta0 = design.x @ design.embed(truth)
    n = design.n
    if not support:
        val = float(np.sum(family.renyi_gap(alpha, np.zeros(n), eta0, tau))) / n
        return RenyiEntry((), 0, val, n * val, [])
    xs = design.sub(support)
    f = _renyi_objective(family, xs, eta0, tau, alpha, n)
    rng = np.random.default_rng(np.random.SeedSequence([seed, *support]))
    # least-squares projection of eta0 is a natural start
    ls = np.linalg.lstsq(xs, eta0, rcond=None)[0]
    starts = [np.zeros(xs.shape[1]), ls] + [ls + rng.standard_normal(xs.shape[1]) for _ in range(restarts - 2)]
    best, best_x, ok = math.inf, None, True
    for x0 in starts:
        try:
            res = optimize.minimize(f, x0, jac=True, method="L-BFGS-B",
                                    options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-11})
        except (FloatingPointError, ValueError):
            continue
        if np.isfinite(res.fun) and res.fun < best:
            converged = bool(res.success) or float(np.max(np.abs(res.jac))) <= 1e-7
            best, best_x, ok = float(res.fun), res.x, converged
    if best_x is None:
        return RenyiEntry(tuple(support), xs.shape[1], math.nan, math.nan, [], True)
    entry = RenyiEntry(tuple(support), xs.shape[1], max(best, 0.0), n * max(best, 0.0),
                       [float(v) for v in best_x], not ok, opt_R=max(best, 0.0))
    if xs.shape[1] == 1:
        entry.grid_R = renyi_grid_1d(family, xs[:, 0], eta0, tau, alpha, center=float(best_x[0]))
        if entry.flagged or entry.grid_R < entry.R:
            entry.R = entry.grid_R
            entry.nR = n * entry.grid_R
    return entry


def renyi_grid_1d(family, x, eta0, tau, alpha, center=0.0, half_width=None, points=2001) -> float:
    """Dense grid search refined by bounded scalar minimization."""
    n = x.size
    if half_width is None:
        half_width = max(5.0, 4.0 * abs(center) + 5.0)

    def f(b):
        return float(np.sum(family.renyi_gap(alpha, x * b, eta0, tau))) / n

    grid = np.linspace(center - half_width, center + half_width, points)
    vals = np.empty(points)
    step = max(1, 400_000 // n)
    for a in range(0, points, step):
        g = grid[a:a + step, None]
        vals[a:a + step] = np.sum(family.renyi_gap(alpha, g * x[None, :], eta0[None, :], tau[None, :]),
                                  axis=1) / n
    k = int(np.argmin(vals))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, points - 1)]
    res = optimize.minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-13})
    return float(min(res.fun, vals[k]))


def renyi_separation(family: GlmFamily, design: GroupedDesign, tau, truth: PaddedVector, alpha: float,
                     s_max: int, c_r: float = 1.0, restarts: int = 16, seed: int = 0) -> RenyiTable:
    """``R_{alpha,n}(S)`` for every support of size ``<= s_max`` that misses a true group."""
    s0 = set(truth.support)
    supports = [S for S in enumerate_supports(design.G, s_max) if not s0 <= set(S)]
    entries = parallel_map(lambda S: renyi_minimize(family, design, tau, truth, S, alpha, restarts, seed),
                           supports)
    G = design.G
    total = 0.0
    for e in entries:
        if np.isfinite(e.nR):
            total += math.exp(-e.nR + c_r * e.p + c_r * (len(s0) + len(e.support)) * math.log(G))
    return RenyiTable(design.n, alpha, entries, total, c_r)


def renyi_transform_check(family: GlmFamily, design: GroupedDesign, tau, truth: PaddedVector, support,
                          beta_S, alpha: float, replications: int, seed: int) -> tuple[float, float, float]:
    """Monte-Carlo mean of ``exp{alpha (l_S(b) - l(beta0))}`` against ``exp(-sum J)``."""
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (design.n,))
    eta0 = design.x @ design.embed(truth)
    eta = design.sub(support) @ np.asarray(beta_S, dtype=float) if support else np.zeros(design.n)
    target = math.exp(-float(np.sum(family.renyi_gap(alpha, eta, eta0, tau))))
    rng = np.random.default_rng(seed)
    Y = np.asarray(family.sample(np.broadcast_to(eta0, (replications, design.n)),
                                 np.broadcast_to(tau, (replications, design.n)), rng), dtype=float)
    l1 = family.loglik_terms(Y, eta[None, :], tau[None, :])[0].sum(axis=1)
    l0 = family.loglik_terms(Y, eta0[None, :], tau[None, :])[0].sum(axis=1)
    v = np.exp(alpha * (l1 - l0))
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(replications)), target


# ---------------------------------------------------------------------------
# Hellinger contraction
# ---------------------------------------------------------------------------

def hellinger_n(family: GlmFamily, design: GroupedDesign, tau, beta, beta0) -> float:
    """Average-Hellinger distance ``H_n`` between two coefficient vectors."""
    eta = design.x @ np.asarray(beta, dtype=float)
    eta0 = design.x @ np.asarray(beta0, dtype=float)
    return math.sqrt(float(np.mean(family.hellinger_sq(eta, eta0, tau))))


def hellinger_contraction(datasets: dict, prior_for, alpha: float, s_max: int, replications: int,
                          seed: int, k_mult: float = 1.0, draws: int = 200) -> list:
    """Average posterior mass outside ``{H_n <= K eps_n}`` along an ``n`` grid."""
    points = []
    for j, n in enumerate(sorted(datasets)):
        ds = datasets[n]
        prior = prior_for(ds) if callable(prior_for) else prior_for
        s0 = len(ds.truth.support)
        radius = k_mult * eps_n(s0, ds.design.G, ds.n)
        eta0 = ds.eta0()
        vals = []
        for rng in replicate_rngs(seed + 104729 * j, replications):
            y = simulate_response(ds.family, eta0, ds.tau, rng)
            sp = support_posterior(ds.with_response(y), prior, alpha, s_max, mode="laplace")
            B = sample_posterior(sp, draws, rng).draws
            eta = B @ ds.design.x.T
            h2 = np.mean(ds.family.hellinger_sq(eta, eta0[None, :], ds.tau[None, :]), axis=1)
            vals.append(float(np.mean(np.sqrt(h2) > radius)))
        v, se = _mean_se(vals)
        points.append(TrendPoint(int(n), "hellinger_exceedance", v, se))
    return points


# ---------------------------------------------------------------------------
# assumption audit
# ---------------------------------------------------------------------------

@dataclass
class AuditRow:
    name: str
    value: float | None
    role: str
    margin: float | None = None
    ok: bool | None = None
    module: str = "design"
    note: str = ""


@dataclass
class DiagnosticsReport:
    rows: list
    recovery_prob: float | None = None
    tv_exact_mixture: float | None = None
    tv_mixture_oracle: float | None = None
    coverage: float | None = None
    renyi: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def row(self, name: str) -> AuditRow | None:
        for r in self.rows:
            if r.name == name:
                return r
        return None

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "recovery_prob": self.recovery_prob,
            "tv_exact_mixture": self.tv_exact_mixture,
            "tv_mixture_oracle": self.tv_mixture_oracle,
            "coverage": self.coverage,
            "renyi": self.renyi,
            "extra": self.extra,
        }


AUDIT_ROW_NAMES = (
    "eps_n", "L_n", "gamma_bar", "gamma_under", "tau_minus", "tau_plus", "r_n0",
    "envelope_s0", "envelope_sdagger", "phi1", "phi2", "q_star", "l_star", "l_star_over_q_star_sq",
    "c_F", "C_F", "gram_min", "gram_max", "beta_min_margin", "localization_product",
    "localization_log_product", "q_star_sqrt_log", "kappa_n0", "zeta_variance_max_dev",
    "zeta_third_moment_max", "b_mgf", "K_sc", "K_lb", "a_pi", "a3", "a4", "a5", "a6",
)


def _unit_weight_range(family: GlmFamily, L: float, points: int = 4001) -> tuple[float, float]:
    grid = np.linspace(-L, L, points)
    w = np.asarray(family.fisher_weight(grid, 1.0))
    return float(w.max()), float(w.min())


def zeta_moments(family: GlmFamily, eta0, tau) -> tuple[float, float]:
    """Max deviation of ``Var zeta_i`` from one and max ``E|zeta_i|^3`` by exact expectation."""
    eta0 = np.asarray(eta0, dtype=float)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), eta0.shape)
    dev, third = 0.0, 0.0
    seen = {}
    for e, t in zip(eta0, tau):
        key = (round(float(e), 12), float(t))
        if key in seen:
            continue
        _, xi1, _ = family.link(e)
        w = float(family.fisher_weight(e, t))
        mu = float(family.mean(e))
        c = float(xi1) / (t * math.sqrt(w))
        v = family.expect(lambda y: (c * (y - mu)) ** 2, e, t)
        m3 = family.expect(lambda y: abs(c * (y - mu)) ** 3, e, t)
        seen[key] = (v, m3)
        dev = max(dev, abs(v - 1.0))
        third = max(third, m3)
    return dev, third


def kappa_n0(family: GlmFamily, design: GroupedDesign, tau, truth: PaddedVector) -> float:
    eta0 = design.x @ design.embed(truth)
    w = np.asarray(family.fisher_weight(eta0, tau), dtype=float)
    xs = design.sub(truth.support)
    F = xs.T @ (w[:, None] * xs)
    R = sym_inv_sqrt(F, truth.support)
    lev = np.linalg.norm(xs @ R, axis=1)
    return float(np.max(np.sqrt(w) * lev))


def assumption_audit(dataset: Dataset, prior: SasPrior | None = None, k_dim: int = 3, mc: int = 20_000,
                     seed: int = 0, b_mgf: float | None = None, phi1_restarts: int = 64,
                     zeta: bool = True) -> DiagnosticsReport:
    """Table of instance constants with the inequality each enters and its margin."""
    design, family, truth = dataset.design, dataset.family, dataset.truth
    if truth is None or not truth.support:
        raise ValueError("audit needs a nonempty true support")
    rows: list[AuditRow] = []
    n, G = design.n, design.G
    s0 = len(truth.support)
    s_dag = min(G, k_dim * s0)
    eps = eps_n(s0, G, n)
    eta0 = dataset.eta0()
    tau = dataset.tau
    w0 = dataset.truth_weights()
    L_n = max(1.0, 2.0 * float(np.max(np.abs(eta0))))
    g_bar, g_under = _unit_weight_range(family, L_n)
    tau_m, tau_p = float(tau.min()), float(tau.max())
    rows += [AuditRow("eps_n", eps, "target rate sqrt(s0 log G / n)", module="diagnostics"),
             AuditRow("L_n", L_n, "envelope level with ||X beta0||_inf <= L_n/2", module="diagnostics"),
             AuditRow("gamma_bar", g_bar, "sup of unit Fisher weight on |eta| <= L_n", module="glm_family"),
             AuditRow("gamma_under", g_under, "inf of unit Fisher weight on |eta| <= L_n", module="glm_family"),
             AuditRow("tau_minus", tau_m, "dispersion lower bound", module="glm_family"),
             AuditRow("tau_plus", tau_p, "dispersion upper bound", module="glm_family")]

    def guarded(name, fn, role, module="design"):
        try:
            return fn()
        except EnumerationBudgetError as exc:
            rows.append(AuditRow(name, None, role, None, False, module, f"budget: {exc}"))
        except (SingularBlockError, np.linalg.LinAlgError) as exc:
            rows.append(AuditRow(name, None, role, None, False, module, f"singular: {exc}"))
        return None

    env0 = sparse_row_envelope(design, s0)
    env_d = sparse_row_envelope(design, s_dag)
    r_n0 = eps / (env0 * math.sqrt(g_bar / tau_m))
    rows += [AuditRow("r_n0", r_n0, "truth-centered coefficient radius", module="prior"),
             AuditRow("envelope_s0", env0, "sparse row envelope at s0"),
             AuditRow("envelope_sdagger", env_d, f"sparse row envelope at s={s_dag}")]

    phi2 = guarded("phi2", lambda: compatibility_phi2(design, w0, s_dag), "compatibility phi2(s)")
    if phi2 is not None:
        rows.append(AuditRow("phi2", phi2, f"compatibility phi2({s_dag}) with truth weights",
                             ok=phi2 > 0))
    phi1 = guarded("phi1", lambda: compatibility_phi1(design, w0, s_dag, restarts=phi1_restarts, seed=seed),
                   "compatibility phi1(s)")
    if phi1 is not None:
        rows.append(AuditRow("phi1", phi1.value, f"compatibility phi1({s_dag})", ok=phi1.value > 0,
                             note=phi1.certificate))
    ql = guarded("q_star", lambda: sparse_influence_leverage(design, w0, s_dag), "sparse influence")
    if ql is not None:
        q, lev = ql
        rows += [AuditRow("q_star", q, "unweighted sparse influence norm"),
                 AuditRow("l_star", lev, "weighted sparse leverage"),
                 AuditRow("l_star_over_q_star_sq", lev / q**2, "comparability of leverage and influence"),
                 AuditRow("q_star_sqrt_log", q * math.sqrt(s_dag * math.log(G)),
                          "q_star sqrt(s log G) should be small", margin=1.0 - q * math.sqrt(s_dag * math.log(G)),
                          ok=q * math.sqrt(s_dag * math.log(G)) < 1.0)]
    ext = guarded("c_F", lambda: sparse_gram_extremes(design, w0, s_dag), "truth-Fisher sparse eigenvalues")
    if ext is not None:
        rows += [AuditRow("c_F", ext[0], "min sparse truth-Fisher eigenvalue / n", ok=ext[0] > 0),
                 AuditRow("C_F", ext[1], "max sparse truth-Fisher eigenvalue / n")]
    gram = guarded("gram_min", lambda: sparse_gram_extremes(design, None, s_dag), "sparse Gram eigenvalues")
    if gram is not None:
        rows += [AuditRow("gram_min", gram[0], "min sparse Gram eigenvalue / n"),
                 AuditRow("gram_max", gram[1], "max sparse Gram eigenvalue / n")]
    if phi2 is not None and phi2 > 0:
        bmin = float(min(np.linalg.norm(truth.values[sl]) for sl in design.block_slices(truth.support)))
        margin = bmin * phi2 / eps
        rows.append(AuditRow("beta_min_margin", margin, "min_g ||beta0_g|| phi2 / eps_n (beta-min multiple)",
                             margin=margin, ok=margin > 1.0, module="diagnostics"))
        loc = env_d * eps / phi2 * math.sqrt(g_bar / tau_m)
        rows.append(AuditRow("localization_product", loc,
                             "x_n(s) eps_n phi2^{-1} sqrt(gamma_bar/tau_-) bounded by a small constant",
                             margin=1.0 - loc, ok=loc < 1.0, module="diagnostics"))
        loc2 = env_d * eps / phi2 * s0 * math.log(G)
        rows.append(AuditRow("localization_log_product", loc2, "x_n(s) eps_n phi2^{-1} s0 log G",
                             margin=1.0 - loc2, ok=loc2 < 1.0, module="diagnostics"))
    kap = guarded("kappa_n0", lambda: kappa_n0(family, design, tau, truth), "active-block leverage",
                  module="diagnostics")
    if kap is not None:
        rows.append(AuditRow("kappa_n0", kap, "active-block leverage, should be small",
                             margin=1.0 - kap, ok=kap < 1.0, module="diagnostics"))
    if zeta:
        dev, m3 = zeta_moments(family, eta0, tau)
        rows += [AuditRow("zeta_variance_max_dev", dev, "Var zeta_i = 1 exactly", ok=dev < 1e-8,
                          module="glm_family"),
                 AuditRow("zeta_third_moment_max", m3, "max E|zeta_i|^3 (bounded third moment)",
                          module="glm_family")]
    if b_mgf is None:
        supports = [S for S in enumerate_supports(G, min(G, s0 + 1)) if S and set(truth.support) <= set(S)]
        b_mgf = guarded("b_mgf", lambda: estimate_b_mgf(family, design, tau, truth, supports,
                                                         2.0 * math.sqrt(s0 * math.log(G)), n_dirs=8, seed=seed),
                        "local score mgf constant", module="diagnostics")
    if b_mgf is not None:
        k_sc = 4.0 * math.sqrt(b_mgf * KAPPA0)
        rows += [AuditRow("b_mgf", b_mgf, "sup log-mgf / lambda^2 over the window", module="diagnostics"),
                 AuditRow("K_sc", k_sc, "score envelope multiplier 4 sqrt(b_mgf (3 + log 5))",
                          module="diagnostics")]
    extra = {"s_dagger": s_dag, "n": n, "G": G, "s0": s0}
    if prior is not None:
        fisher0 = None
        cols = design.columns(truth.support)
        F = design.x.T @ (w0[:, None] * design.x)
        fisher0 = F[np.ix_(cols, cols)]
        pa = audit_prior_constants(prior, design, truth, eps, r_n0, mc, seed=seed, fisher=fisher0,
                                   flat_radius=math.sqrt(s0 * math.log(G)))
        rows += [AuditRow("a_pi", pa.a_pi, "true-support prior mass exponent", module="prior"),
                 AuditRow("a3", pa.a3, "upper size-ratio exponent", module="prior"),
                 AuditRow("a4", pa.a4, "lower size-ratio exponent", module="prior"),
                 AuditRow("a5", pa.a5, "small-ball exponent", module="prior",
                          note=pa.small_ball.describe()),
                 AuditRow("a6", pa.a6, "slab height at zero exponent", module="prior")]
        if b_mgf is not None and pa.a5 is not None:
            k_lb = pa.a_pi + pa.a5 + 4.0 + 4.0 * b_mgf * KAPPA0
            rows.append(AuditRow("K_lb", k_lb, "evidence lower bound constant (recorded, not asserted)",
                                 module="diagnostics"))
        extra["prior_audit"] = pa.to_dict()
    return DiagnosticsReport(rows, extra=extra)
