"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``. The full file takes
roughly a quarter of an hour on one core; ``-m "not slow"`` keeps only the
quick criteria. Verdict lines are printed in the terminal summary.
"""
import hashlib
import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, special, stats

from sparse_bvm.cli import main as cli_main
from sparse_bvm.dataset import Dataset
from sparse_bvm.design import PaddedVector, enumerate_supports
from sparse_bvm.diagnostics import (coverage_experiment, renyi_separation, score_envelope_experiment,
                                    support_recovery_experiment, trend_is_monotone, tv_between_support_mixtures)
from sparse_bvm.experiments import bundled_config, generate_dataset, load_config, make_prior_for, validate_config
from sparse_bvm.family import KINDS
from sparse_bvm.posterior import exact_log_marginal, laplace_log_marginal, mixture_weights, support_posterior
from sparse_bvm.prior import SizePrior, log_slab_density, log_slab_grad_hess, make_prior
from sparse_bvm.restricted import RestrictedModel, loglik_grad_hess, loglik_value, schur_projection

from conftest import ACCEPTANCE_LINES, make_family, normalized_design, proper_tau
from test_family import total_mass


def verdict(k: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {k:2d} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)


def rel_err(a, b, floor=1.0) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.abs(b))))


def affinity(fam, alpha, eta, eta0, tau) -> float:
    """``int f_eta^alpha f_eta0^(1-alpha) dnu`` over a range covering both laws."""

    def log_geo(v):
        return alpha * fam.log_density(v, eta, tau) + (1 - alpha) * fam.log_density(v, eta0, tau)

    if fam.kind in ("logistic", "probit"):
        return float(np.exp(special.logsumexp(log_geo(np.array([0.0, 1.0])))))
    if fam.kind in ("poisson", "negbin_log"):
        top = int(60 * math.exp(max(eta, eta0)) + 200)
        return float(np.exp(special.logsumexp(log_geo(np.arange(top + 1, dtype=float)))))
    if fam.kind == "gaussian":
        sd = math.sqrt(tau)
        lo, hi = min(eta, eta0) - 40 * sd, max(eta, eta0) + 40 * sd
        return integrate.quad(lambda v: math.exp(log_geo(v)), lo, hi, points=sorted({eta, eta0}),
                              epsabs=1e-14, epsrel=1e-12, limit=400)[0]
    # gamma: integrate in log y, where the shape-below-one singularity at zero disappears
    mus = [math.exp(eta), math.exp(eta0)]
    dists = [stats.gamma(1.0 / tau, scale=m * tau) for m in mus]
    lo = math.log(min(d.ppf(1e-18) for d in dists))
    hi = math.log(max(d.isf(1e-18) for d in dists))
    pts = sorted(math.log(d.ppf(q)) for d in dists for q in (1e-6, 0.5, 1 - 1e-6))
    return integrate.quad(lambda u: math.exp(log_geo(math.exp(u)) + u), lo, hi, points=pts,
                          epsabs=1e-14, epsrel=1e-12, limit=400)[0]


def cfg_from(name: str, **over) -> dict:
    raw = load_config(bundled_config(name))
    raw.update(over)
    return validate_config(raw)


# ---------------------------------------------------------------------------
# shared instance for the trend, recovery, mixture and Renyi criteria
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trend_cfg():
    return cfg_from("logistic_trend")


@pytest.fixture(scope="module")
def trend_datasets(trend_cfg):
    return {n: generate_dataset(trend_cfg, n=n) for n in trend_cfg["n_grid"]}


@pytest.fixture(scope="module")
def trend_curves(trend_cfg, trend_datasets):
    t0 = time.perf_counter()
    pts = support_recovery_experiment(trend_datasets, make_prior_for(trend_cfg), trend_cfg["alpha"],
                                      trend_cfg["s_max"], trend_cfg["replications"]["recovery"],
                                      trend_cfg["seed"], trend_cfg["k_dim"])
    curves = {}
    for p in pts:
        curves.setdefault(p.metric, []).append((p.n, p.value, p.se))
    for v in curves.values():
        v.sort()
    return curves, time.perf_counter() - t0


class TestExactness:
    def test_c01_conjugate_exactness(self):
        t0 = time.perf_counter()
        n, G, sigma2, alpha = 50, 3, 2.0, 0.7
        rng = np.random.default_rng(101)
        fam = make_family("gaussian")
        d = normalized_design(n, G, seed=101)
        truth = PaddedVector((0, 2), [0.8, -0.5])
        tau = np.full(n, 1.3)
        y = fam.sample(d.x @ d.embed(truth), tau, rng)
        ds = Dataset(fam, d, tau, y, truth)
        prior = make_prior({"kind": "complexity", "c": 1.0, "A": 1.0}, {"sigma2": sigma2}, [1] * G)
        sups = enumerate_supports(G, G)

        def closed_form(S):
            l0 = alpha * float(np.sum(fam.loglik_terms(y, np.zeros(n), tau)[0]))
            if not S:
                return l0
            x = d.sub(S)
            A = alpha * x.T @ (x / tau[:, None]) + np.eye(len(S)) / sigma2
            b = alpha * x.T @ (y / tau)
            return 0.5 * b @ np.linalg.solve(A, b) - 0.5 * np.linalg.slogdet(A)[1] - 0.5 * len(S) * math.log(sigma2)

        worst_marg = 0.0
        ref = {}
        for S in sups:
            ref[S] = closed_form(S)
            m = ds.model(S)
            lap = laplace_log_marginal(m, prior, alpha)
            ex = exact_log_marginal(m, prior, alpha).log_exact
            worst_marg = max(worst_marg, abs(lap - ref[S]), abs(ex - ref[S]))
        lw = np.array([prior.log_support_mass(S) + ref[S] for S in sups])
        w = np.exp(lw - lw.max())
        w /= w.sum()
        worst_w = 0.0
        for mode in ("laplace", "exact"):
            sp = support_posterior(ds, prior, alpha, G, mode=mode)
            assert sp.supports == sups
            worst_w = max(worst_w, float(np.max(np.abs(sp.weights() - w))))
        elapsed = time.perf_counter() - t0
        ok = worst_marg <= 1e-8 and worst_w <= 1e-10 and elapsed < 5.0
        verdict(1, "conjugate exactness", ok,
                f"max marginal err {worst_marg:.2e} (tol 1e-8), max weight err {worst_w:.2e} (tol 1e-10), "
                f"{elapsed:.2f}s (limit 5s)")
        assert ok

    def test_c02_transform_identity(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(202)
        worst = {}
        for kind in KINDS:
            fam = make_family(kind)
            err = 0.0
            for _ in range(200):
                alpha = float(rng.uniform(0.05, 0.95))
                eta, eta0 = rng.uniform(-2.0, 2.0, 2)
                tau = proper_tau(fam, rng)
                lhs = affinity(fam, alpha, eta, eta0, tau)
                err = max(err, abs(lhs - math.exp(-float(fam.renyi_gap(alpha, eta, eta0, tau)))))
            worst[kind] = err
        elapsed = time.perf_counter() - t0
        ok = max(worst.values()) <= 1e-7 and elapsed < 30.0
        detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
        verdict(2, "transform identity", ok, f"max |lhs - exp(-J)| per family: {detail} (tol 1e-7), "
                                             f"{elapsed:.1f}s (limit 30s)")
        assert ok

    def test_c03_schur_identity(self):
        rng = np.random.default_rng(303)
        worst = 0.0
        for _ in range(500):
            p = int(rng.integers(2, 9))
            p0 = int(rng.integers(1, p))
            A = rng.standard_normal((p, p))
            F = A @ A.T + float(rng.uniform(0.05, 2.0)) * np.eye(p)
            g = rng.standard_normal(p)
            direct = g @ np.linalg.solve(F, g) - g[:p0] @ np.linalg.solve(F[:p0, :p0], g[:p0])
            res = schur_projection(F, g, p0)
            worst = max(worst, abs(res.excess - direct) / abs(direct))
        ok = worst <= 1e-9
        verdict(3, "Schur identity", ok, f"max relative error {worst:.2e} over 500 instances (tol 1e-9)")
        assert ok

    def test_c04_derivatives_and_normalization(self):
        rng = np.random.default_rng(404)
        fd_err, norm_err, fisher_err = 0.0, 0.0, 0.0
        h = 1e-5
        for kind in KINDS:
            fam = make_family(kind)
            lo, hi = fam.natural_domain
            th = np.linspace(max(lo, -6.0) + 0.05, min(hi, 6.0) - 0.05, 100)
            b, b1, b2 = fam.cumulant(th)
            fd_err = max(fd_err, rel_err(b1, (fam.cumulant(th + h)[0] - fam.cumulant(th - h)[0]) / (2 * h)),
                         rel_err(b2, (fam.cumulant(th + h)[1] - fam.cumulant(th - h)[1]) / (2 * h)))
            eta = np.linspace(-5, 5, 100)
            _, x1, x2 = fam.link(eta)
            fd_err = max(fd_err, rel_err(x1, (fam.link(eta + h)[0] - fam.link(eta - h)[0]) / (2 * h)),
                         rel_err(x2, (fam.link(eta + h)[1] - fam.link(eta - h)[1]) / (2 * h)))
            # restricted log-likelihood gradient and Hessian
            d = normalized_design(60, 3, seed=int(rng.integers(1 << 30)), sizes=[1, 2, 1])
            tau = proper_tau(fam, rng)
            y = fam.sample(d.x @ (0.3 * rng.standard_normal(4)), tau, rng)
            m = RestrictedModel(fam, d, tau, (0, 1, 2), y)
            bb = 0.2 * rng.standard_normal(m.p)
            _, g, H = loglik_grad_hess(m, bb)
            E = np.eye(m.p)
            hh = 1e-6
            g_fd = np.array([(loglik_value(m, bb + hh * e) - loglik_value(m, bb - hh * e)) / (2 * hh) for e in E])
            H_fd = -np.array([(loglik_grad_hess(m, bb + hh * e)[1] - loglik_grad_hess(m, bb - hh * e)[1]) / (2 * hh)
                              for e in E])
            fd_err = max(fd_err, np.linalg.norm(g - g_fd) / max(1.0, np.linalg.norm(g)),
                         np.linalg.norm(H - H_fd) / max(1.0, np.linalg.norm(H)))
            for e0 in np.linspace(-2, 2, 9):
                t = proper_tau(fam, rng)
                norm_err = max(norm_err, abs(total_mass(fam, e0, t) - 1.0))
                expected = fam.expect(lambda v: float(fam.loglik_terms(v, e0, t)[2]), e0, t)
                fisher_err = max(fisher_err, abs(expected - fam.fisher_weight(e0, t)) / (1 + abs(expected)))
        for slab in ({"kind": "group_gaussian", "sigma2": 2.0}, {"kind": "group_laplace", "lambda": 0.7}):
            prior = make_prior({}, slab, [2, 3])
            bb = rng.standard_normal(5)
            g, H = log_slab_grad_hess(prior, (0, 1), bb)
            E = np.eye(5)
            g_fd = np.array([(log_slab_density(prior, (0, 1), bb + h * e) - log_slab_density(prior, (0, 1), bb - h * e))
                             / (2 * h) for e in E])
            H_fd = np.array([(log_slab_grad_hess(prior, (0, 1), bb + h * e)[0]
                              - log_slab_grad_hess(prior, (0, 1), bb - h * e)[0]) / (2 * h) for e in E])
            fd_err = max(fd_err, rel_err(g, g_fd), rel_err(H, H_fd))
            # each active coordinate of a one-dimensional group integrates separately
            one = integrate.quad(lambda v: math.exp(prior.slab.log_group_density([v])), -np.inf, np.inf,
                                 epsabs=1e-14, epsrel=1e-13)[0]
            total = 0.0
            p3 = make_prior({"kind": "beta_binomial", "u": 1.5}, slab, [1, 1, 1])
            for s in range(4):
                for S in itertools.combinations(range(3), s):
                    total += math.exp(p3.log_support_mass(S)) * one**s
            norm_err = max(norm_err, abs(total - 1.0))
        for size in (SizePrior("complexity", 30, c=2.0, A=1.5), SizePrior("beta_binomial", 30, u=2.0)):
            norm_err = max(norm_err, abs(float(np.exp(size.log_masses()).sum()) - 1.0))
        ok = fd_err <= 1e-6 and norm_err <= 1e-8 and fisher_err <= 1e-7
        verdict(4, "derivatives and normalization", ok,
                f"max FD rel err {fd_err:.2e} (tol 1e-6), max normalization err {norm_err:.2e} (tol 1e-8), "
                f"max fisher_weight err {fisher_err:.2e} (tol 1e-7)")
        assert ok


@pytest.mark.slow
class TestTrends:
    def test_c05_oracle_collapse(self, trend_curves):
        curves, elapsed = trend_curves
        tv = curves["tv_mixture_oracle"]
        vals = [v for _, v, _ in tv]
        steps = [(vals[k] - vals[k + 1]) / math.hypot(tv[k][2], tv[k + 1][2]) for k in range(len(tv) - 1)]
        # every step is a decrease by more than 2 standard errors of the difference
        ok = all(z > 2.0 for z in steps) and vals[-1] <= 0.05 and elapsed < 600
        detail = ", ".join(f"n={n}: {v:.4f} (se {se:.4f})" for n, v, se in tv)
        verdict(5, "oracle collapse trend", ok,
                f"{detail}; step z-scores {', '.join(f'{z:.1f}' for z in steps)} (need > 2); "
                f"terminal <= 0.05; {elapsed:.0f}s incl. recovery curves (limit 600s)")
        assert ok

    def test_c06_exact_vs_mixture(self, trend_cfg, trend_datasets):
        ds = trend_datasets[1600]
        prior = make_prior_for(trend_cfg)
        alpha = trend_cfg["alpha"]
        exact = support_posterior(ds, prior, alpha, trend_cfg["s_max"], mode="exact",
                                  exact_screen=trend_cfg["tolerances"]["exact_screen"])
        mix = mixture_weights(ds, prior, alpha, k_dim=trend_cfg["k_dim"])
        tv = tv_between_support_mixtures(exact, mix, mc=int(trend_cfg["tolerances"]["tv_mc"]),
                                         seed=trend_cfg["seed"])
        ok = tv.value <= 0.10 and tv.se <= 0.01
        verdict(6, "exact posterior vs mixture", ok,
                f"TV {tv.value:.4f} (tol 0.10), se {tv.se:.1e} (tol 0.01), "
                f"screened mass {exact.meta['screened_mass']:.1e}")
        assert ok

    def test_c07_support_recovery(self, trend_curves):
        curves, _ = trend_curves
        post, mode = curves["posterior_recovery"], curves["mode_recovery"]
        top_post, top_mode = post[-1][1], mode[-1][1]
        mono = all(trend_is_monotone([v for _, v, _ in c], [0.0 if math.isnan(se) else se for _, _, se in c],
                                     increasing=True, slack=2.0) for c in (post, mode))
        ok = top_post >= 0.95 and top_mode >= 0.95 and mono
        verdict(7, "support recovery", ok,
                "posterior mass " + ", ".join(f"{v:.4f}" for _, v, _ in post)
                + "; mode hit rate " + ", ".join(f"{v:.3f}" for _, v, _ in mode)
                + f" at n={[n for n, _, _ in post]}; need >= 0.95 at n=1600; nondecreasing within 2 se: {mono}")
        assert ok

    def test_c10_renyi_table(self, trend_cfg, trend_datasets):
        alpha, s_max = trend_cfg["alpha"], trend_cfg["s_max"]
        s0 = set(trend_cfg["truth"]["support"])
        tables = {}
        for n, ds in sorted(trend_datasets.items()):
            tables[n] = renyi_separation(ds.family, ds.design, ds.tau, ds.truth, alpha, s_max,
                                         c_r=trend_cfg["renyi_c"], seed=trend_cfg["seed"])
        expected = {S for S in enumerate_supports(20, s_max) if not s0 <= set(S)}
        complete = all({e.support for e in t.entries} == expected for t in tables.values())
        positive = all(e.R > 0 and not e.flagged for t in tables.values() for e in t.entries)
        grid_gap = max(abs(e.opt_R - e.grid_R) for t in tables.values() for e in t.entries if e.p == 1)
        ns = sorted(tables)
        ratio = tables[ns[0]].summability / tables[ns[-1]].summability
        ok = complete and positive and grid_gap <= 1e-6 and ratio >= 10
        verdict(10, "Renyi table", ok,
                f"all {len(expected)} non-covering supports R > 0 at every n: {positive}; "
                f"min R {', '.join(f'{tables[n].min_R():.4f}' for n in ns)}; "
                f"max |opt - grid| on 1-d entries {grid_gap:.1e} (tol 1e-6); summability "
                f"{', '.join(f'{tables[n].summability:.3g}' for n in ns)}, drop x{ratio:.3g} (need >= 10)")
        assert ok


@pytest.mark.slow
class TestCoverage:
    def test_c08_coverage(self):
        t0 = time.perf_counter()
        parts, ok = [], True
        for name in ("coverage_gaussian", "coverage_logistic"):
            cfg = cfg_from(name)
            assert cfg["alpha"] == 1.0 and cfg["design"]["n"] == 2000 and cfg["design"]["G"] == 50
            ds = generate_dataset(cfg)
            res = coverage_experiment(ds.family, ds.design, ds.truth, make_prior_for(cfg), cfg["alpha"],
                                      cfg["level"], cfg["replications"]["coverage"], cfg["seed"], cfg["s_max"],
                                      tau=ds.tau)
            within = abs(res.coverage - cfg["level"]) <= 3 * res.se
            ok &= within and res.credibility_gap <= 0.05
            parts.append(f"{cfg['family']['kind']} coverage {res.coverage:.3f} (0.95 +- {3 * res.se:.4f}), "
                         f"gap {res.credibility_gap:.4f} (tol 0.05), {res.used}/{res.replications} used")
        elapsed = time.perf_counter() - t0
        ok &= elapsed < 900
        verdict(8, "coverage", ok, "; ".join(parts) + f"; {elapsed:.0f}s (limit 900s)")
        assert ok


@pytest.mark.slow
class TestScoreEnvelope:
    def test_c09_score_envelope(self):
        cfg = cfg_from("score_logistic")
        ds = generate_dataset(cfg)
        s = cfg["score_s"]
        res = score_envelope_experiment(ds.family, ds.design, ds.truth, s, cfg["replications"]["score"],
                                        cfg["seed"], tau=ds.tau)
        ok_log = res.exceedance <= res.bound + 3 * res.se
        gcfg = validate_config({**load_config(bundled_config("score_logistic")),
                                "family": {"kind": "gaussian", "tau": 1.0}})
        gds = generate_dataset(gcfg)
        g = score_envelope_experiment(gds.family, gds.design, gds.truth, s, gcfg["replications"]["score"],
                                      gcfg["seed"], tau=gds.tau)
        # Z_S is linear Gaussian, so ||Z_S||^2 ~ chi2 exactly when its covariance is the identity
        ok_g = (abs(g.b_mgf - 0.5) <= 1e-3 and g.per_support_check <= 1e-3
                and g.exceedance <= g.chi2_union_bound + 3 * g.se)
        ok = ok_log and ok_g
        verdict(9, "score envelope", ok,
                f"logistic exceedance {res.exceedance:.2e} (bound {res.bound:.2e} + 3se {3 * res.se:.1e}), "
                f"K_sc {res.k_sc:.3f}, b_mgf {res.b_mgf:.4f}; gaussian b_mgf {g.b_mgf:.6f} (0.5 +- 1e-3), "
                f"max |Cov(Z_S) - I| {g.per_support_check:.1e} (tol 1e-3), exceedance {g.exceedance:.2e} "
                f"vs chi2 union bound {g.chi2_union_bound:.2e}")
        assert ok


class TestDeterminism:
    def test_c11_byte_identical_artifacts(self, tmp_path):
        cfg = str(bundled_config("example_gaussian"))
        digests = []
        for run in ("a", "b"):
            out = tmp_path / run
            for cmd in ("generate", "fit", "diagnose", "coverage", "audit"):
                assert cli_main([cmd, "--config", cfg, "--out", str(out / cmd)]) == 0
            files = sorted(p for p in out.rglob("*") if p.is_file())
            digests.append({str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files})
        n_json = sum(1 for k in digests[0] if k.endswith(".json"))
        ok = digests[0] == digests[1] and n_json >= 5
        verdict(11, "determinism", ok, f"{len(digests[0])} artifacts ({n_json} JSON) over 5 subcommands, "
                                       f"identical bytes on rerun: {digests[0] == digests[1]}")
        assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([str(Path(__file__)), "-v"]))
