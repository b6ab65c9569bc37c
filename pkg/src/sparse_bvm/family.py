"""Exponential-dispersion GLM families.

Each family bundles the cumulant ``b`` (natural parameter ``theta``) with the
map ``xi`` from the linear predictor ``eta`` to ``theta``, so that
``theta = xi(eta)`` and the mean is ``b'(xi(eta))``.  All methods are
vectorized over numpy arrays and return plain floats for scalar input.

Discrete families (logistic, probit, Poisson, negative binomial) only admit
the unit dispersion ``tau = 1`` when a proper density is required
(``log_density``, ``sample``, ``expect``); likelihood-side quantities accept
any positive ``tau``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate, special, stats

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_LOG_2PI = math.log(2.0 * math.pi)
_CF_SWITCH = 8.0
_CF_TERMS = 200
_COUNT_TAIL = 1e-12

KINDS = ("gaussian", "logistic", "poisson", "probit", "gamma_log", "negbin_log")
KIND_CODES = {kind: code for code, kind in enumerate(KINDS)}


class DomainError(ValueError):
    """Natural parameter or observation outside the family's domain."""


def _out(x):
    x = np.asarray(x, dtype=float)
    return x[()] if x.ndim == 0 else x


def _lam_minus_x(x):
    """``phi(x)/Phi(-x) - x`` without cancellation (inverse Mills ratio excess)."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x <= _CF_SWITCH
    xs = x[small]
    out[small] = _SQRT_2_OVER_PI / special.erfcx(xs / math.sqrt(2.0)) - xs
    xl = x[~small]
    if xl.size:
        # continued fraction: lambda(x) - x = 1/(x + 2/(x + 3/(x + ...)))
        v = np.array(xl, copy=True)
        for k in range(_CF_TERMS, 1, -1):
            v = xl + k / v
        out[~small] = 1.0 / v
    return out


def _mills(x):
    """``phi(x)/Phi(x)``, stable for all real x."""
    x = np.asarray(x, dtype=float)
    return _SQRT_2_OVER_PI / special.erfcx(-x / math.sqrt(2.0))


class GlmFamily:
    """Base class; subclasses fill in the cumulant and link maps."""

    kind: str = ""
    canonical: bool = False
    discrete: bool = False
    natural_domain: tuple[float, float] = (-math.inf, math.inf)

    size_r: float | None = None

    @property
    def code(self) -> int:
        return KIND_CODES[self.kind]

    def __repr__(self) -> str:
        if self.size_r is not None:
            return f"{type(self).__name__}(size_r={self.size_r!r})"
        return f"{type(self).__name__}()"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, GlmFamily)
            and other.kind == self.kind
            and other.size_r == self.size_r
        )

    def __hash__(self) -> int:
        return hash((self.kind, self.size_r))

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.size_r is not None:
            d["size_r"] = self.size_r
        return d

    # -- primitives supplied by subclasses ---------------------------------

    def _cumulant(self, theta):
        raise NotImplementedError

    def _cumulant_value(self, theta):
        return self._cumulant(theta)[0]

    def _cumulant_d1(self, theta):
        return self._cumulant(theta)[1]

    def _link(self, eta):
        raise NotImplementedError

    def mean(self, eta):
        """``b'(xi(eta))``."""
        raise NotImplementedError

    def _unit_weight(self, eta):
        """``b''(xi(eta)) * xi'(eta)**2`` (Fisher weight at tau = 1)."""
        raise NotImplementedError

    def _loglik_terms(self, y, eta):
        """Per-observation ``y*theta - b(theta)``, its eta-derivative and
        the negative second derivative, all at unit dispersion."""
        theta, xi1, xi2 = self._link(eta)
        b, b1, b2 = self._cumulant(theta)
        resid = y - b1
        return y * theta - b, xi1 * resid, b2 * xi1**2 - xi2 * resid

    def _log_carrier(self, y, tau):
        raise NotImplementedError

    def _check_y(self, y):
        raise NotImplementedError

    def _draw(self, eta, tau, rng):
        raise NotImplementedError

    # -- public API --------------------------------------------------------

    def check_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        lo, hi = self.natural_domain
        if not np.all(np.isfinite(theta)) or np.any(theta <= lo) or np.any(theta >= hi):
            raise DomainError(
                f"{self.kind}: natural parameter outside ({lo}, {hi})")
        return theta

    def cumulant(self, theta):
        """Return ``(b, b', b'')`` at ``theta``."""
        theta = self.check_theta(theta)
        return tuple(_out(v) for v in self._cumulant(theta))

    def link(self, eta):
        """Return ``(xi, xi', xi'')`` at ``eta``."""
        eta = np.asarray(eta, dtype=float)
        if not np.all(np.isfinite(eta)):
            raise DomainError("linear predictor must be finite")
        return tuple(_out(v) for v in self._link(eta))

    def natural(self, eta):
        return _out(self._link(np.asarray(eta, dtype=float))[0])

    def fisher_weight(self, eta, tau=1.0):
        """``(h^{-1})'(eta) xi'(eta) / tau``, the truth-Fisher weight."""
        tau = np.asarray(tau, dtype=float)
        if np.any(tau <= 0):
            raise ValueError("dispersion must be positive")
        return _out(self._unit_weight(np.asarray(eta, dtype=float)) / tau)

    def loglik_terms(self, y, eta, tau=1.0):
        """Carrier-free log-likelihood contributions and eta-derivatives.

        Returns ``(l, s, a)`` with ``l = (y theta - b(theta))/tau``,
        ``s = dl/deta`` and ``a = -d^2 l/deta^2`` (observed information,
        including the ``xi''`` residual term for noncanonical links).
        """
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        tau = np.asarray(tau, dtype=float)
        l, s, a = self._loglik_terms(y, eta)
        return l / tau, s / tau, a / tau

    def log_density(self, y, eta, tau=1.0):
        """Exact ``log f(y; xi(eta), tau)`` including the carrier."""
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        tau = np.asarray(tau, dtype=float)
        self._check_y(y)
        self._check_tau(tau)
        l, _, _ = self._loglik_terms(y, eta)
        return _out(l / tau + self._log_carrier(y, tau))

    def sample(self, eta, tau=1.0, rng=None, size=None):
        rng = np.random.default_rng(rng)
        eta = np.asarray(eta, dtype=float)
        tau = np.asarray(tau, dtype=float)
        self._check_tau(tau)
        if size is not None:
            eta = np.broadcast_to(eta, size)
            tau = np.broadcast_to(tau, size)
        else:
            eta, tau = np.broadcast_arrays(eta, tau)
        return _out(self._draw(eta, tau, rng))

    def renyi_gap(self, alpha, eta, eta0, tau=1.0):
        """One-observation Renyi gap, the Jensen gap of ``b`` in theta."""
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        theta = np.asarray(self._link(np.asarray(eta, dtype=float))[0])
        theta0 = np.asarray(self._link(np.asarray(eta0, dtype=float))[0])
        mix = alpha * theta + (1.0 - alpha) * theta0
        self.check_theta(mix)
        b = self._cumulant_value
        gap = alpha * b(theta) + (1.0 - alpha) * b(theta0) - b(mix)
        gap = np.where(theta == theta0, 0.0, np.maximum(gap, 0.0))
        return _out(gap / np.asarray(tau, dtype=float))

    def renyi_gap_deta(self, alpha, eta, eta0, tau=1.0):
        """Derivative of the Renyi gap in its first argument."""
        theta, xi1, _ = self._link(np.asarray(eta, dtype=float))
        theta0 = self._link(np.asarray(eta0, dtype=float))[0]
        mix = alpha * theta + (1.0 - alpha) * theta0
        d = alpha * (self._cumulant(theta)[1] - self._cumulant(mix)[1]) * xi1
        return _out(d / np.asarray(tau, dtype=float))

    def renyi_gap_with_deta(self, alpha, eta, eta0, tau=1.0, b0=None):
        """Summed Renyi gap and its per-observation eta-derivative in one pass.

        ``b0`` may carry precomputed ``b(xi(eta0))`` when ``eta0`` is fixed.
        """
        theta, xi1, _ = self._link(np.asarray(eta, dtype=float))
        theta0 = self._link(np.asarray(eta0, dtype=float))[0]
        mix = alpha * theta + (1.0 - alpha) * theta0
        self.check_theta(mix)
        if b0 is None:
            b0 = self._cumulant_value(theta0)
        tau = np.asarray(tau, dtype=float)
        gap = alpha * self._cumulant_value(theta) + (1.0 - alpha) * b0 - self._cumulant_value(mix)
        gap = np.where(theta == theta0, 0.0, np.maximum(gap, 0.0)) / tau
        d = alpha * (self._cumulant_d1(theta) - self._cumulant_d1(mix)) * xi1 / tau
        return float(np.sum(gap)), d

    def hellinger_sq(self, eta, eta0, tau=1.0):
        """Squared Hellinger distance ``int (sqrt f - sqrt g)^2``.

        Uses the affinity ``int sqrt(f g) = exp(-J_{1/2})``.
        """
        j = self.renyi_gap(0.5, eta, eta0, tau)
        return _out(-2.0 * np.expm1(-np.asarray(j)))

    def log_mgf(self, t, eta, tau=1.0):
        """``log E exp(t Y)`` under ``xi(eta)``, i.e. ``(b(theta+t tau)-b(theta))/tau``."""
        t = np.asarray(t, dtype=float)
        tau = np.asarray(tau, dtype=float)
        theta = self._link(np.asarray(eta, dtype=float))[0]
        shifted = theta + t * tau
        lo, hi = self.natural_domain
        out = np.full(np.broadcast(shifted, theta).shape, np.inf)
        ok = np.broadcast_to((shifted > lo) & (shifted < hi), out.shape)
        sb = np.broadcast_to(shifted, out.shape)
        tb = np.broadcast_to(theta, out.shape)
        taub = np.broadcast_to(tau, out.shape)
        out[ok] = (self._cumulant(sb[ok])[0] - self._cumulant(tb[ok])[0]) / taub[ok]
        return _out(out)

    def expect(self, func, eta, tau=1.0):
        """Exact ``E func(Y)`` for a scalar ``eta`` (summation or quadrature)."""
        eta = float(eta)
        tau = float(tau)
        self._check_tau(np.asarray(tau))
        return float(self._expect(func, eta, tau))

    def _check_tau(self, tau):
        if np.any(tau <= 0):
            raise ValueError("dispersion must be positive")
        if self.discrete and np.any(tau != 1.0):
            raise DomainError(f"{self.kind}: a proper density requires tau = 1")

    def _expect(self, func, eta, tau):
        raise NotImplementedError


class _Binary(GlmFamily):
    discrete = True

    def _cumulant(self, theta):
        p = special.expit(theta)
        return np.logaddexp(0.0, theta), p, p * special.expit(-theta)

    def _cumulant_value(self, theta):
        return np.logaddexp(0.0, theta)

    def _cumulant_d1(self, theta):
        return special.expit(theta)

    def _log_carrier(self, y, tau):
        return np.zeros_like(y)

    def _check_y(self, y):
        if np.any((y != 0.0) & (y != 1.0)):
            raise DomainError(f"{self.kind}: observations must be 0 or 1")

    def _draw(self, eta, tau, rng):
        return (rng.random(eta.shape) < self.mean(eta)).astype(float)

    def _expect(self, func, eta, tau):
        p1 = float(self.mean(eta))
        return (1.0 - p1) * func(0.0) + p1 * func(1.0)


class Gaussian(GlmFamily):
    kind = "gaussian"
    canonical = True

    def _cumulant(self, theta):
        return 0.5 * theta**2, theta, np.ones_like(theta)

    def _link(self, eta):
        return eta, np.ones_like(eta), np.zeros_like(eta)

    def mean(self, eta):
        return _out(np.asarray(eta, dtype=float))

    def _unit_weight(self, eta):
        return np.ones_like(eta)

    def _log_carrier(self, y, tau):
        return -0.5 * y**2 / tau - 0.5 * (_LOG_2PI + np.log(tau))

    def _check_y(self, y):
        if not np.all(np.isfinite(y)):
            raise DomainError("gaussian: observations must be finite")

    def _draw(self, eta, tau, rng):
        return eta + np.sqrt(tau) * rng.standard_normal(eta.shape)

    def _expect(self, func, eta, tau):
        sd = math.sqrt(tau)
        val, _ = integrate.quad(
            lambda z: func(eta + sd * z) * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi),
            -40.0, 40.0, points=[0.0], epsabs=1e-13, epsrel=1e-12, limit=400)
        return val


class Logistic(_Binary):
    kind = "logistic"
    canonical = True

    def _link(self, eta):
        return eta, np.ones_like(eta), np.zeros_like(eta)

    def mean(self, eta):
        return _out(special.expit(np.asarray(eta, dtype=float)))

    def _unit_weight(self, eta):
        return special.expit(eta) * special.expit(-eta)


class Probit(_Binary):
    kind = "probit"

    def _link(self, eta):
        eta = np.asarray(eta, dtype=float)
        theta = special.log_ndtr(eta) - special.log_ndtr(-eta)
        m_pos = _mills(eta)
        m_neg = _mills(-eta)
        xi1 = m_pos + m_neg
        # xi'' is odd; evaluate on |eta| where lam(|eta|) - |eta| is stable
        a = np.abs(eta)
        xi1_abs = _mills(a) + _mills(-a)
        xi2_abs = xi1_abs * (_lam_minus_x(a) - _mills(a))
        xi2 = np.sign(eta) * xi2_abs
        return theta, xi1, xi2

    def mean(self, eta):
        return _out(special.ndtr(np.asarray(eta, dtype=float)))

    def _unit_weight(self, eta):
        eta = np.asarray(eta, dtype=float)
        dens = np.exp(-0.5 * eta**2) / math.sqrt(2 * math.pi)
        return dens * (_mills(eta) + _mills(-eta))

    def _loglik_terms(self, y, eta):
        y, eta = np.broadcast_arrays(np.asarray(y, float), np.asarray(eta, float))
        l = y * special.log_ndtr(eta) + (1.0 - y) * special.log_ndtr(-eta)
        lam_pos = _mills(-eta)  # phi/Phi(-eta)
        lam_neg = _mills(eta)  # phi/Phi(eta)
        s = y * lam_neg - (1.0 - y) * lam_pos
        a = y * lam_neg * _lam_minus_x(-eta) + (1.0 - y) * lam_pos * _lam_minus_x(eta)
        return l, s, a


class Poisson(GlmFamily):
    kind = "poisson"
    canonical = True
    discrete = True

    def _cumulant(self, theta):
        e = np.exp(theta)
        return e, e, e

    def _link(self, eta):
        return eta, np.ones_like(eta), np.zeros_like(eta)

    def mean(self, eta):
        return _out(np.exp(np.asarray(eta, dtype=float)))

    def _unit_weight(self, eta):
        return np.exp(eta)

    def _log_carrier(self, y, tau):
        return -special.gammaln(y + 1.0)

    def _check_y(self, y):
        if np.any((y < 0) | (y != np.floor(y))):
            raise DomainError("poisson: observations must be nonnegative integers")

    def _draw(self, eta, tau, rng):
        return rng.poisson(np.exp(eta)).astype(float)

    def _expect(self, func, eta, tau):
        mu = math.exp(eta)
        top = int(stats.poisson.isf(_COUNT_TAIL / 10, mu)) + 10
        ys = np.arange(top + 1, dtype=float)
        pm = np.exp(stats.poisson.logpmf(ys, mu))
        return float(sum(p * func(v) for p, v in zip(pm, ys)))


class GammaLog(GlmFamily):
    kind = "gamma_log"
    natural_domain = (-math.inf, 0.0)

    def _cumulant(self, theta):
        return -np.log(-theta), -1.0 / theta, 1.0 / theta**2

    def _link(self, eta):
        e = np.exp(-np.asarray(eta, dtype=float))
        return -e, e, -e

    def mean(self, eta):
        return _out(np.exp(np.asarray(eta, dtype=float)))

    def _unit_weight(self, eta):
        return np.ones_like(np.asarray(eta, dtype=float))

    def _loglik_terms(self, y, eta):
        y, eta = np.broadcast_arrays(np.asarray(y, float), np.asarray(eta, float))
        e = np.exp(-eta)
        # y*theta - b(theta) = -y e^{-eta} - eta
        return -y * e - eta, y * e - 1.0, y * e

    def _log_carrier(self, y, tau):
        shape = 1.0 / tau
        return shape * np.log(shape) + (shape - 1.0) * np.log(y) - special.gammaln(shape)

    def _check_y(self, y):
        if np.any(~(y > 0)) or not np.all(np.isfinite(y)):
            raise DomainError("gamma_log: observations must be positive")

    def _draw(self, eta, tau, rng):
        shape = 1.0 / tau
        return rng.gamma(shape, np.exp(eta) * tau)

    def _expect(self, func, eta, tau):
        shape = 1.0 / tau
        dist = stats.gamma(shape, scale=math.exp(eta) * tau)
        lo, hi = dist.ppf(1e-16), dist.isf(1e-16)
        pts = [dist.ppf(q) for q in (1e-8, 1e-4, 0.01, 0.5, 0.99, 1 - 1e-4, 1 - 1e-8)]
        val, _ = integrate.quad(lambda v: func(v) * dist.pdf(v), lo, hi,
                                points=pts, epsabs=1e-14, epsrel=1e-12, limit=500)
        return val


class NegBinLog(GlmFamily):
    kind = "negbin_log"
    discrete = True
    natural_domain = (-math.inf, 0.0)

    def __init__(self, size_r: float):
        size_r = float(size_r)
        if not size_r > 0:
            raise ValueError("negative-binomial size r must be positive")
        self.size_r = size_r

    def _cumulant(self, theta):
        r = self.size_r
        em1 = -np.expm1(theta)  # 1 - e^theta
        e = np.exp(theta)
        return -r * np.log(em1), r * e / em1, r * e / em1**2

    def _link(self, eta):
        eta = np.asarray(eta, dtype=float)
        logr = math.log(self.size_r)
        theta = eta - np.logaddexp(logr, eta)
        s = special.expit(eta - logr)
        return theta, 1.0 - s, -s * (1.0 - s)

    def mean(self, eta):
        return _out(np.exp(np.asarray(eta, dtype=float)))

    def _unit_weight(self, eta):
        mu = np.exp(np.asarray(eta, dtype=float))
        return self.size_r * mu / (self.size_r + mu)

    def _loglik_terms(self, y, eta):
        y, eta = np.broadcast_arrays(np.asarray(y, float), np.asarray(eta, float))
        r = self.size_r
        logr = math.log(r)
        lse = np.logaddexp(logr, eta)
        s = special.expit(eta - logr)  # mu/(r+mu)
        l = y * (eta - lse) + r * (logr - lse)
        score = (1.0 - s) * y - r * s
        # -l'' = (y + r) s (1 - s)
        return l, score, (y + r) * s * (1.0 - s)

    def _log_carrier(self, y, tau):
        r = self.size_r
        return special.gammaln(y + r) - special.gammaln(r) - special.gammaln(y + 1.0)

    def _check_y(self, y):
        if np.any((y < 0) | (y != np.floor(y))):
            raise DomainError("negbin_log: observations must be nonnegative integers")

    def _draw(self, eta, tau, rng):
        r = self.size_r
        mu = np.exp(eta)
        return rng.negative_binomial(r, r / (r + mu)).astype(float)

    def _expect(self, func, eta, tau):
        r = self.size_r
        mu = math.exp(eta)
        p = r / (r + mu)
        top = int(stats.nbinom.isf(_COUNT_TAIL / 10, r, p)) + 10
        ys = np.arange(top + 1, dtype=float)
        pm = np.exp(stats.nbinom.logpmf(ys, r, p))
        return float(sum(q * func(v) for q, v in zip(pm, ys)))


def get_family(kind: str, size_r: float | None = None) -> GlmFamily:
    """Factory keyed by family kind."""
    if kind == "negbin_log":
        if size_r is None:
            raise ValueError("negbin_log requires size_r")
        return NegBinLog(size_r)
    classes = {
        "gaussian": Gaussian,
        "logistic": Logistic,
        "poisson": Poisson,
        "probit": Probit,
        "gamma_log": GammaLog,
    }
    try:
        return classes[kind]()
    except KeyError:
        raise ValueError(f"unknown family kind {kind!r}; expected one of {KINDS}") from None


def eval_cumulant(family: GlmFamily, theta):
    return family.cumulant(theta)


def eval_link(family: GlmFamily, eta):
    return family.link(eta)


def count_support_upper(family: GlmFamily, eta: float, tail: float = _COUNT_TAIL) -> int:
    """Smallest count ``K`` with ``P(Y > K) <= tail`` (count families)."""
    mu = math.exp(eta)
    if family.kind == "poisson":
        return int(stats.poisson.isf(tail, mu))
    if family.kind == "negbin_log":
        r = family.size_r
        return int(stats.nbinom.isf(tail, r, r / (r + mu)))
    raise ValueError("count_support_upper applies to count families only")
