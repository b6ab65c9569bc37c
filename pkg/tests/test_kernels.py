import json
import os
import subprocess
import sys

import numpy as np
import pytest

from sparse_bvm import kernels
from sparse_bvm.design import enumerate_supports
from sparse_bvm.family import KINDS

from conftest import make_family, normalized_design, proper_tau

needs_compiled = pytest.mark.skipif(not kernels.compiled_available(), reason="compiled kernels not built")


def padded_cols(design, supports):
    pmax = max(len(design.columns(S)) for S in supports)
    cols = -np.ones((len(supports), pmax), dtype=np.int64)
    for j, S in enumerate(supports):
        c = design.columns(S)
        cols[j, :len(c)] = c
    return cols


def instance(kind, seed=0, n=150):
    rng = np.random.default_rng(seed)
    fam = make_family(kind)
    d = normalized_design(n, 5, seed=seed, sizes=[1, 2, 1, 1, 2])
    beta = np.zeros(d.p)
    beta[0], beta[1:3] = 0.5, [-0.3, 0.2]
    tau = np.full(n, proper_tau(fam, rng))
    y = fam.sample(d.x @ beta, tau, rng)
    return fam, d, y, tau


def run(backend, fam, d, y, tau, supports, **kw):
    cols = padded_cols(d, supports)
    return kernels.fit_supports(d.x, y, tau, fam.code, fam.size_r or 0.0, cols, backend=backend, **kw)


class TestDispatch:
    def test_backend_name(self):
        assert kernels.BACKEND in ("compiled", "python")
        assert kernels.get_backend("python") is kernels._kernels_py

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.get_backend("fortran")

    def test_env_forces_python(self):
        code = "import json, sparse_bvm; print(json.dumps(sparse_bvm.BACKEND))"
        env = dict(os.environ, SPARSE_BVM_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        assert json.loads(out.stdout) == "python"


@needs_compiled
class TestBackendParity:
    @pytest.mark.parametrize("kind", KINDS)
    def test_fit_supports(self, kind):
        fam, d, y, tau = instance(kind, seed=KINDS.index(kind))
        sups = enumerate_supports(d.G, 2)
        ref = run("python", fam, d, y, tau, sups)
        fast = run("compiled", fam, d, y, tau, sups)
        beta_p, ll_p, info_p, st_p, _ = ref
        beta_c, ll_c, info_c, st_c, _ = fast
        assert np.array_equal(st_p, st_c)
        assert np.allclose(beta_p, beta_c, atol=1e-8, rtol=0)
        assert np.allclose(ll_p, ll_c, rtol=1e-11, atol=1e-9)
        assert np.allclose(info_p, info_c, rtol=1e-8, atol=1e-8)
        assert np.all(info_c == np.swapaxes(info_c, 1, 2))

    @pytest.mark.parametrize("kind", KINDS)
    def test_loglik_points(self, kind):
        fam, d, y, tau = instance(kind, seed=10 + KINDS.index(kind))
        cols = np.array(d.columns((0, 1)), dtype=np.int64)
        B = 0.3 * np.random.default_rng(1).standard_normal((40, cols.size))
        a = kernels.loglik_points(d.x, y, tau, fam.code, fam.size_r or 0.0, cols, B, backend="python")
        b = kernels.loglik_points(d.x, y, tau, fam.code, fam.size_r or 0.0, cols, B, backend="compiled")
        assert np.allclose(a, b, rtol=1e-12, atol=1e-9)

    def test_tempered_penalized_objective(self):
        fam, d, y, tau = instance("logistic", seed=3)
        sups = enumerate_supports(d.G, 2)
        kw = dict(alpha=0.5, prior_prec=1.0)
        p = run("python", fam, d, y, tau, sups, **kw)
        c = run("compiled", fam, d, y, tau, sups, **kw)
        assert np.allclose(p[0], c[0], atol=1e-8, rtol=0)


class TestKernelSemantics:
    @pytest.mark.parametrize("kind", ["gaussian", "poisson", "gamma_log"])
    def test_warm_start_same_optimum(self, kind):
        fam, d, y, tau = instance(kind, seed=5)
        sups = [(0,), (0, 1), (0, 1, 3)]
        cold = run(None, fam, d, y, tau, sups)
        warm = run(None, fam, d, y, tau, sups, parent=np.array([-1, 0, 1]))
        assert np.allclose(cold[0], warm[0], atol=1e-7, rtol=0)

    def test_loglik_matches_family(self):
        fam, d, y, tau = instance("negbin_log", seed=8)
        cols = np.array(d.columns((1,)), dtype=np.int64)
        B = np.array([[0.1, -0.2], [0.0, 0.0]])
        got = kernels.loglik_points(d.x, y, tau, fam.code, fam.size_r, cols, B)
        for k in range(2):
            l, _, _ = fam.loglik_terms(y, d.x[:, cols] @ B[k], tau)
            assert np.isclose(got[k], l.sum(), rtol=1e-12)

    def test_empty_support_row(self):
        fam, d, y, tau = instance("probit", seed=9)
        cols = -np.ones((1, 1), dtype=np.int64)
        _, ll, _, st, _ = kernels.fit_supports(d.x, y, tau, fam.code, 0.0, cols)
        l, _, _ = fam.loglik_terms(y, np.zeros(d.n), tau)
        assert st[0] == 0 and np.isclose(ll[0], l.sum(), rtol=1e-12)
