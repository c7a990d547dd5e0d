"""Five conjugate benchmark models with exact posteriors and marginals.

Conventions: Gamma(shape, rate); Beta(a, b); Case 5 components are
N(mean, variance) unless ``as_variance=False``, in which case 0.1 is the
standard deviation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import betaln, gammaln

from . import autodiff as ad


class InvalidObservation(ValueError):
    pass


def _log(z):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(z)


@dataclass(frozen=True)
class ConjugateModel:
    """Base class; subclasses fill in densities for one latent scalar z."""

    case_id: int = 0
    support: tuple = (-np.inf, np.inf)
    probe_x: tuple = ()
    reference_x: float = 0.0
    latent_dim: int = 1

    @property
    def bounded_support(self) -> bool:
        return bool(np.isfinite(self.support[0]) or np.isfinite(self.support[1]))

    def in_support(self, z):
        z = np.asarray(z, dtype=float)
        return (z > self.support[0]) & (z < self.support[1])

    def check_x(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise InvalidObservation(f"case {self.case_id}: non-finite observation")
        return x

    def log_joint(self, x, z) -> np.ndarray:
        x = self.check_x(x)
        z = np.asarray(z, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self._log_joint(x, z)
        return np.where(self.in_support(z), out, -np.inf)

    def dlog_joint(self, x, z) -> np.ndarray:
        """d/dz log p(x, z); zero off the support."""
        x = self.check_x(x)
        z = np.asarray(z, dtype=float)
        ok = self.in_support(z)
        zs = np.where(ok, z, self._inside_point())
        return np.where(ok, self._dlog_joint(x, zs), 0.0)

    def log_joint_node(self, x, z):
        """Tape-aware log joint, summed over the trailing latent axis."""
        lj = ad.elementwise(lambda v: self.log_joint(x, v), lambda v: self.dlog_joint(x, v), z)
        return ad.sum_(lj, axis=-1)

    def _inside_point(self) -> float:
        lo, hi = self.support
        if np.isfinite(lo) and np.isfinite(hi):
            return 0.5 * (lo + hi)
        if np.isfinite(lo):
            return lo + 1.0
        return 0.0

    # subclass hooks
    def _log_joint(self, x, z):
        raise NotImplementedError

    def _dlog_joint(self, x, z):
        raise NotImplementedError

    def log_prior(self, z):
        return self.prior().logpdf(z)

    def prior(self):
        """Prior of z as a frozen distribution (pdf, logpdf, ppf, mean, std)."""
        raise NotImplementedError

    def prior_interval(self, tail: float = 1e-3) -> tuple[float, float]:
        pr = self.prior()
        return float(pr.ppf(tail)), float(pr.ppf(1 - tail))

    def posterior(self, x):
        raise NotImplementedError

    def log_marginal(self, x) -> float:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def log_lik(self, x, z):
        return self.log_joint(x, z) - self.log_prior(z)

    def posterior_pdf(self, x, z) -> np.ndarray:
        return self.posterior(x).pdf(z)

    def posterior_interval(self, x, tail: float = 1e-6) -> tuple[float, float]:
        post = self.posterior(x)
        return float(post.ppf(tail)), float(post.ppf(1 - tail))


@dataclass(frozen=True)
class GammaExponential(ConjugateModel):
    case_id: int = 1
    support: tuple = (0.0, np.inf)
    probe_x: tuple = (0.0, 1.0, 2.0)
    reference_x: float = 1.0

    def check_x(self, x):
        x = super().check_x(x)
        if np.any(x < 0):
            raise InvalidObservation("case 1 needs x >= 0")
        return x

    def prior(self):
        return stats.gamma(2.0, scale=0.5)

    def _log_joint(self, x, z):
        return math.log(4.0) + 2.0 * _log(z) - (2.0 + x) * z

    def _dlog_joint(self, x, z):
        return 2.0 / z - (2.0 + x)

    def posterior(self, x):
        x = float(self.check_x(x))
        return stats.gamma(3.0, scale=1.0 / (2.0 + x))

    def log_marginal(self, x):
        x = float(self.check_x(x))
        return math.log(8.0) - 3.0 * math.log(2.0 + x)

    def sample(self, rng, n):
        z = rng.gamma(2.0, 0.5, size=n)
        return rng.exponential(1.0 / z), z


class _CountMixin:
    upper: float = np.inf

    def check_x(self, x):
        x = ConjugateModel.check_x(self, x)
        if np.any(x < 0) or np.any(x != np.round(x)) or np.any(x > self.upper):
            raise InvalidObservation(f"case {self.case_id} needs integer x in [0, {self.upper}]")
        return x


@dataclass(frozen=True)
class GammaPoisson(_CountMixin, ConjugateModel):
    case_id: int = 2
    support: tuple = (0.0, np.inf)
    probe_x: tuple = (0.0, 1.0, 2.0)
    reference_x: float = 1.0

    def prior(self):
        return stats.gamma(2.0, scale=0.5)

    def _log_joint(self, x, z):
        return math.log(4.0) + (1.0 + x) * _log(z) - 3.0 * z - gammaln(x + 1.0)

    def _dlog_joint(self, x, z):
        return (1.0 + x) / z - 3.0

    def posterior(self, x):
        x = float(self.check_x(x))
        return stats.gamma(2.0 + x, scale=1.0 / 3.0)

    def log_marginal(self, x):
        x = float(self.check_x(x))
        return math.log(4.0 * (x + 1.0)) - (x + 2.0) * math.log(3.0)

    def sample(self, rng, n):
        z = rng.gamma(2.0, 0.5, size=n)
        return rng.poisson(z).astype(float), z


@dataclass(frozen=True)
class BetaBernoulli(_CountMixin, ConjugateModel):
    case_id: int = 3
    support: tuple = (0.0, 1.0)
    probe_x: tuple = (0.0, 1.0)
    reference_x: float = 0.0
    upper: float = 1.0

    def prior(self):
        return stats.beta(7.0, 3.0)

    def _log_joint(self, x, z):
        return -betaln(7.0, 3.0) + (6.0 + x) * _log(z) + (3.0 - x) * _log(1.0 - z)

    def _dlog_joint(self, x, z):
        return (6.0 + x) / z - (3.0 - x) / (1.0 - z)

    def posterior(self, x):
        x = float(self.check_x(x))
        return stats.beta(7.0 + x, 4.0 - x)

    def log_marginal(self, x):
        x = float(self.check_x(x))
        return float(betaln(7.0 + x, 4.0 - x) - betaln(7.0, 3.0))

    def sample(self, rng, n):
        z = rng.beta(7.0, 3.0, size=n)
        return (rng.uniform(size=n) < z).astype(float), z


@dataclass(frozen=True)
class BetaBinomial(_CountMixin, ConjugateModel):
    case_id: int = 4
    support: tuple = (0.0, 1.0)
    probe_x: tuple = (7.0, 8.0, 9.0)
    reference_x: float = 7.0
    upper: float = 10.0

    def prior(self):
        return stats.beta(2.0, 2.0)

    @staticmethod
    def _log_choose(x):
        return gammaln(11.0) - gammaln(x + 1.0) - gammaln(11.0 - x)

    def _log_joint(self, x, z):
        return (-betaln(2.0, 2.0) + self._log_choose(x)
                + (1.0 + x) * _log(z) + (11.0 - x) * _log(1.0 - z))

    def _dlog_joint(self, x, z):
        return (1.0 + x) / z - (11.0 - x) / (1.0 - z)

    def posterior(self, x):
        x = float(self.check_x(x))
        return stats.beta(2.0 + x, 12.0 - x)

    def log_marginal(self, x):
        x = float(self.check_x(x))
        return float(self._log_choose(x) + betaln(2.0 + x, 12.0 - x) - betaln(2.0, 2.0))

    def sample(self, rng, n):
        z = rng.beta(2.0, 2.0, size=n)
        return rng.binomial(10, z).astype(float), z


class NormalMixturePosterior:
    """Two-component Gaussian mixture with a scipy-like pdf/cdf/ppf surface."""

    def __init__(self, weights, means, var):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.asarray(means, dtype=float)
        self.sd = math.sqrt(var)

    def pdf(self, z):
        z = np.asarray(z, dtype=float)[..., None]
        return (self.weights * stats.norm.pdf(z, self.means, self.sd)).sum(-1)

    def cdf(self, z):
        z = np.asarray(z, dtype=float)[..., None]
        return (self.weights * stats.norm.cdf(z, self.means, self.sd)).sum(-1)

    def logpdf(self, z):
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(z))

    def mean(self):
        return float(self.weights @ self.means)

    def std(self):
        second = float(self.weights @ (self.means ** 2)) + self.sd ** 2
        return math.sqrt(second - self.mean() ** 2)

    def ppf(self, q):
        from scipy.optimize import brentq

        lo = self.means.min() - 12 * self.sd
        hi = self.means.max() + 12 * self.sd
        return brentq(lambda v: float(self.cdf(v)) - q, lo, hi, xtol=1e-14)


@dataclass(frozen=True)
class NormalMixtureNormal(ConjugateModel):
    case_id: int = 5
    support: tuple = (-np.inf, np.inf)
    probe_x: tuple = (0.6, 0.7, 0.8)
    reference_x: float = 0.8
    as_variance: bool = True
    centers: tuple = (-0.5, 0.5)

    @property
    def prior_var(self) -> float:
        return 0.1 if self.as_variance else 0.01

    def in_support(self, z):
        return np.isfinite(np.asarray(z, dtype=float))

    def log_prior(self, z):
        z = np.asarray(z, dtype=float)[..., None]
        sd = math.sqrt(self.prior_var)
        comps = stats.norm.logpdf(z, np.array(self.centers), sd) + math.log(0.5)
        return np.logaddexp(comps[..., 0], comps[..., 1])

    def _log_joint(self, x, z):
        return self.log_prior(z) + stats.norm.logpdf(x, z, 1.0)

    def _dlog_joint(self, x, z):
        v = self.prior_var
        zz = np.asarray(z, dtype=float)[..., None]
        m = np.array(self.centers)
        lc = -0.5 * (zz - m) ** 2 / v
        r = np.exp(lc - lc.max(-1, keepdims=True))
        r /= r.sum(-1, keepdims=True)
        return (r * (-(zz - m) / v)).sum(-1) + (x - z)

    def prior(self):
        return NormalMixturePosterior([0.5, 0.5], self.centers, self.prior_var)

    def posterior(self, x):
        x = float(self.check_x(x))
        v = self.prior_var
        m = np.array(self.centers)
        logw = stats.norm.logpdf(x, m, math.sqrt(v + 1.0))
        w = np.exp(logw - logw.max())
        w /= w.sum()
        return NormalMixturePosterior(w, (m + v * x) / (1.0 + v), v / (1.0 + v))

    def log_marginal(self, x):
        x = float(self.check_x(x))
        m = np.array(self.centers)
        comps = math.log(0.5) + stats.norm.logpdf(x, m, math.sqrt(self.prior_var + 1.0))
        return float(np.logaddexp(comps[0], comps[1]))

    def sample(self, rng, n):
        comp = rng.integers(0, 2, size=n)
        z = np.array(self.centers)[comp] + math.sqrt(self.prior_var) * rng.standard_normal(n)
        return z + rng.standard_normal(n), z


def get_model(case_id: int, case5_as_variance: bool = True) -> ConjugateModel:
    if case_id == 1:
        return GammaExponential()
    if case_id == 2:
        return GammaPoisson()
    if case_id == 3:
        return BetaBernoulli()
    if case_id == 4:
        return BetaBinomial()
    if case_id == 5:
        return NormalMixtureNormal(as_variance=case5_as_variance)
    raise ValueError(f"unknown case id {case_id}; expected 1..5")


def log_joint(model: ConjugateModel, x, z):
    return model.log_joint(x, z)


def true_posterior(model: ConjugateModel, x):
    """Exact posterior pdf of z given x, as a callable."""
    post = model.posterior(x)
    return post.pdf


def log_marginal(model: ConjugateModel, x) -> float:
    return model.log_marginal(x)


def generate_dataset(model: ConjugateModel, n: int, rng: np.random.Generator):
    """Ancestral samples ``(x, z)``; ``z`` is kept for diagnostics only."""
    if n < 1:
        raise ValueError("need n >= 1")
    return model.sample(rng, n)


def dataset_csv(x: np.ndarray, z: np.ndarray, seed: int | None = None) -> str:
    """CSV text with columns ``x, z`` (and ``seed`` first when given)."""
    head = "seed,x,z\n" if seed is not None else "x,z\n"
    lead = f"{seed}," if seed is not None else ""
    return head + "".join(f"{lead}{float(a)!r},{float(b)!r}\n" for a, b in zip(x, z))
