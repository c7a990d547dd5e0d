"""Variational densities and importance-weighted objectives.

The spline posterior for latent j is a location-scale family
``q(z_j) = (1 / sigma_j) sum_k gamma_jk b_k((z_j - mu_j) / sigma_j)`` on
``[mu_j, mu_j + sigma_j]``.  Objectives are returned as tape nodes (or
plain arrays when the inputs are not recorded) and are maximized.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import autodiff as ad
from .models import ConjugateModel
from .nn import EncoderOutput
from .sampling import BasisBank, concrete, gumbel, relaxed_epsilon
from .splines import SplineSpace, basis_quantile, eval_basis, eval_basis_derivative

NORM_FLOOR = 1e-6
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass
class SplinePosteriorParams:
    mu: np.ndarray      # (J,)
    sigma: np.ndarray   # (J,)
    gamma: np.ndarray   # (J, K)

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        self.gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        if np.any(self.sigma <= 0):
            raise ValueError("scales must be positive")
        if np.any(self.gamma < 0) or not np.allclose(self.gamma.sum(-1), 1.0, atol=1e-10):
            raise ValueError("coefficient rows must lie on the simplex")

    def support(self, j: int = 0) -> tuple[float, float]:
        return float(self.mu[j]), float(self.mu[j] + self.sigma[j])

    def marginal_pdf(self, space: SplineSpace, z, j: int = 0) -> np.ndarray:
        """Density of latent ``j`` at ``z`` (any shape)."""
        eps = (np.asarray(z, dtype=float) - self.mu[j]) / self.sigma[j]
        return eval_basis(space, eps) @ self.gamma[j] / self.sigma[j]


def basis_node(space: SplineSpace, eps):
    """b_k(eps) for every k, as a tape op (trailing axis K)."""
    ve = ad.value(eps)
    vals = eval_basis(space, ve)
    if not isinstance(eps, ad.Node):
        return vals
    d = eval_basis_derivative(space, ve, 1)
    return ad._make(vals, (eps,), (lambda g: (g * d).sum(-1),))


def mixture_log_density(gamma, eps, space: SplineSpace):
    """``log sum_k gamma_k b_k(eps)`` summed over the latent axis."""
    q = ad.sum_(gamma * basis_node(space, eps), axis=-1)
    return ad.sum_(ad.log(q), axis=-1)


def spline_log_density(params: SplinePosteriorParams, z, space: SplineSpace) -> np.ndarray:
    """log q(z) for z of shape (..., J); -inf outside the support."""
    z = np.asarray(z, dtype=float)
    eps = (z - params.mu) / params.sigma
    with np.errstate(divide="ignore"):
        return mixture_log_density(params.gamma, eps, space) - np.log(params.sigma).sum()


@dataclass(frozen=True)
class ObjectiveConfig:
    T: int = 10
    lam: float = 0.0
    kappa: float = 0.0
    gamma0: tuple | None = None
    stl: bool = False
    hard: bool = False

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("need T >= 1")
        if self.lam < 0 or self.kappa < 0:
            raise ValueError("penalty weights must be nonnegative")


@dataclass
class SplineNoise:
    """Fixed randomness for one objective evaluation (replayable)."""

    gumbel: np.ndarray   # (B, T, J, K)
    w: np.ndarray        # (B, T, J, K) basis draws

    @classmethod
    def draw(cls, rng: np.random.Generator, bank: BasisBank, B: int, T: int, J: int) -> "SplineNoise":
        w = bank.pick((B, T, J))
        return cls(gumbel(rng, w.shape), w)

    @classmethod
    def draw_exact(cls, rng: np.random.Generator, space: SplineSpace, B: int, T: int, J: int) -> "SplineNoise":
        """Fresh inverse-CDF basis draws instead of the MH bank; for oracle checks."""
        u = rng.uniform(size=(B, T, J, space.K))
        w = np.stack([basis_quantile(space, k + 1, u[..., k]) for k in range(space.K)], axis=-1)
        return cls(gumbel(rng, w.shape), w)

    def exact_eps(self, log_gamma: np.ndarray) -> np.ndarray:
        """Categorical (Gumbel-max) choice among the basis draws: an exact
        mixture sample, with no relaxation."""
        k = np.argmax(log_gamma[:, None] + self.gumbel, axis=-1)
        return np.take_along_axis(self.w, k[..., None], axis=-1)[..., 0]


@dataclass
class ObjectiveResult:
    total: object                # scalar node/array: sum over usable examples
    per_example: np.ndarray      # (B,) values
    usable: np.ndarray           # (B,) bool mask of finite examples

    @property
    def n_bad(self) -> int:
        return int((~self.usable).sum())


def _masked_total(per_example) -> ObjectiveResult:
    v = ad.value(per_example)
    usable = np.isfinite(v)
    total = ad.sum_(ad.where(usable, per_example, 0.0))
    return ObjectiveResult(total, v, usable)


def iwae_terms(enc: EncoderOutput, model: ConjugateModel, x, space: SplineSpace,
               temperature: float, noise: SplineNoise, exact: bool = False, stl: bool = False, hard: bool = False):
    """Per-example reparameterized IWAE estimate, shape (B,).

    ``log mean_t p(x, mu + sigma * eps_t) / prod_j q_eps(eps_jt) + sum_j log sigma_j``
    with ``eps`` from the concrete relaxation (or the exact categorical
    choice when ``exact``; then eps carries no gradient w.r.t. gamma).
    """
    x = np.asarray(x, dtype=float)
    T = noise.w.shape[1]
    if exact:
        eps = noise.exact_eps(ad.value(enc.log_gamma))
    elif hard:
        u = concrete(ad.expand_dims(enc.log_gamma, 1), temperature, noise.gumbel)
        uv = ad.value(u)
        onehot = (uv == uv.max(-1, keepdims=True)).astype(float)
        eps = ad.sum_((u + (onehot - uv)) * noise.w, axis=-1)
    else:
        eps, _ = relaxed_epsilon(ad.expand_dims(enc.log_gamma, 1), temperature, noise.gumbel, noise.w)
    mu = ad.expand_dims(enc.mu, 1)
    sigma = ad.expand_dims(enc.sigma, 1)
    z = mu + sigma * eps
    log_p = model.log_joint_node(x[:, None, None], z)
    # stl: the coefficients inside log q get no direct gradient (path derivative only)
    gamma = ad.value(enc.gamma) if stl else enc.gamma
    log_q = mixture_log_density(ad.expand_dims(gamma, 1), eps, space)
    lse = ad.logsumexp(log_p - log_q, axis=1)
    return lse - math.log(T) + ad.sum_(ad.log(enc.sigma), axis=-1)


def iwae_objective(enc: EncoderOutput, model: ConjugateModel, x, space: SplineSpace,
                   temperature: float, noise: SplineNoise, exact: bool = False,
                   stl: bool = False) -> ObjectiveResult:
    return _masked_total(iwae_terms(enc, model, x, space, temperature, noise, exact, stl))


def elbo_objective(enc, model, x, space, temperature, noise):
    """Single-sample ELBO on the first importance sample of ``noise``."""
    one = SplineNoise(noise.gumbel[:, :1], noise.w[:, :1])
    return iwae_objective(enc, model, x, space, temperature, one)


def roughness(gamma, P: np.ndarray):
    """``sum_j gamma_j^T P gamma_j`` for each example, shape (B,)."""
    gp = ad.matmul(gamma, P)
    return ad.sum_(ad.sum_(gp * gamma, axis=-1), axis=-1)


def penalized_objective(base, gamma, P: np.ndarray, lam: float):
    """Subtract ``lam * gamma^T P gamma`` (summed over examples and latents)."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if lam == 0:
        return base
    return base - lam * ad.sum_(roughness(gamma, P))


def anti_collapse(gamma_row, gamma0, kappa: float):
    """``kappa / max(||gamma_row - gamma0||, 1e-6)``, summed over leading axes.

    The caller subtracts this from the objective; large when a posterior's
    coefficients sit on the prior-like reference ``gamma0``.
    """
    if kappa == 0:
        return 0.0
    diff = gamma_row - np.asarray(gamma0, dtype=float)
    norm = ad.floor_at(ad.sqrt(ad.sum_(ad.square(diff), axis=-1) + 1e-300), NORM_FLOOR)
    return kappa * ad.sum_(1.0 / norm)


def sadvi_objective(enc: EncoderOutput, model, x, space, cfg: ObjectiveConfig, temperature: float,
                    noise: SplineNoise, P: np.ndarray | None = None) -> ObjectiveResult:
    """Full training objective: IWAE minus roughness and anti-collapse terms."""
    res = _masked_total(iwae_terms(enc, model, x, space, temperature, noise, stl=cfg.stl, hard=cfg.hard))
    total = res.total
    if cfg.lam > 0:
        total = penalized_objective(total, enc.gamma, P, cfg.lam)
    if cfg.kappa > 0:
        g0 = np.full(space.K, 1.0 / space.K) if cfg.gamma0 is None else np.asarray(cfg.gamma0)
        total = total - anti_collapse(enc.gamma, g0, cfg.kappa)
    res.total = total
    return res


# -- Gaussian baselines -----------------------------------------------------

@dataclass
class GaussianPosteriorParams:
    mean: np.ndarray
    sd: np.ndarray
    truncation: tuple | None = None

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.sd = np.atleast_1d(np.asarray(self.sd, dtype=float))
        if np.any(self.sd <= 0):
            raise ValueError("sd must be positive")
        if self.truncation is not None and not self.truncation[0] < self.truncation[1]:
            raise ValueError("degenerate truncation interval")

    def support(self, j: int = 0):
        if self.truncation is None:
            return -np.inf, np.inf
        return self.truncation

    def marginal_pdf(self, z, j: int = 0) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        m, s = self.mean[j], self.sd[j]
        if self.truncation is None:
            return np.exp(-0.5 * ((z - m) / s) ** 2 - _LOG_SQRT_2PI - math.log(s))
        lo, hi = self.truncation
        inside = (z >= lo) & (z <= hi)
        with np.errstate(over="ignore"):
            lp = _truncated_log_density(m, s, lo, hi, np.clip(z, lo, hi))
        return np.where(inside, np.exp(lp), 0.0)


def _log_mills(x):
    """log of the Mills ratio S(x) / phi(x), stable for any x."""
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.log(special.erfcx(np.abs(x) / np.sqrt(2))) + 0.5 * np.log(np.pi / 2)
        neg = special.log_ndtr(-x) + 0.5 * x * x + 0.5 * np.log(2 * np.pi)
    return np.where(x >= 0, pos, neg)


def _log_mills_node(x):
    out = _log_mills(ad.value(x))
    d = ad.value(x) - np.exp(-out)
    return ad._make(out, (x,), (lambda g: g * d,))


def _flip_to_upper(m, lo: float, hi: float):
    """Mask of intervals that sit below the mean and get mirrored."""
    if np.isfinite(lo) and np.isfinite(hi):
        return (lo - m) + (hi - m) < 0
    return np.full(np.shape(m), np.isinf(lo))


def _truncated_log_density(mean, sd, lo: float, hi: float, z):
    """log q(z) for N(mean, sd^2) restricted to [lo, hi], tape-aware.

    Written as ``-log sd - e (a + e/2) - log M(a) - log(1 - S(b)/S(a))`` with
    ``a`` the standardized (mirrored) lower edge, ``e`` the excess of z over
    it and M the Mills ratio, so no two large terms cancel in a deep tail.
    """
    flip = _flip_to_upper(ad.value(mean), lo, hi)
    sign = np.where(flip, -1.0, 1.0)
    lo2 = np.where(flip, -hi, lo)
    a = (lo2 - sign * mean) / sd
    e = (sign * z - lo2) / sd
    out = -ad.log(sd) - e * (a + 0.5 * e) - _log_mills_node(a)
    if np.isfinite(lo) and np.isfinite(hi):
        w = (hi - lo) / sd
        log_ratio_b = -w * (a + 0.5 * w) + _log_mills_node(a + w) - _log_mills_node(a)
        out = out - ad.log(-ad.expm1(log_ratio_b))
    return out


def _truncated_sample(mean, sd, lo: float, hi: float, u: np.ndarray, newton: int = 8):
    """Inverse-CDF draw ``z`` from N(mean, sd^2) restricted to [lo, hi].

    Intervals below the mean are mirrored so the draw is always measured as
    an excess ``e >= 0`` (in sds) over the finite lower edge ``a``.  With the
    normal survival written as S = phi * M for the Mills ratio M, the excess
    solves ``-e (a + e/2) + log M(a + e) - log M(a) = log(1 - u (1 - S(b)/S(a)))``
    by Newton, which keeps full precision millions of sds out in a tail,
    and ``z = lo + sd * e`` carries no cancellation.  The gradient is the
    implicit one, ``dz/dtheta = -(dF/dtheta) / (dF/dz)``, with the edge
    density ratios taken in log space.
    """
    m, s = ad.value(mean), ad.value(sd)
    flip = _flip_to_upper(m, lo, hi)
    m2 = np.where(flip, -m, m)
    lo2 = np.where(flip, -hi, lo)
    hi2 = np.where(flip, -lo, hi)
    v = np.where(flip, 1.0 - u, u)
    a = (lo2 - m2) / s
    width = (hi2 - lo2) / s
    finite = np.isfinite(width)
    wf = np.where(finite, width, 0.0)
    log_ratio_b = np.where(finite, -wf * (a + 0.5 * wf) + _log_mills(a + wf) - _log_mills(a), -np.inf)
    target = np.log1p(-v * -np.expm1(log_ratio_b))
    e = np.clip(-special.ndtri_exp(special.log_ndtr(-a) + target) - a, 0.0, width)
    for _ in range(newton):
        zeta = a + e
        resid = -e * (a + 0.5 * e) + _log_mills(zeta) - _log_mills(a) - target
        e = np.clip(e + resid * np.exp(_log_mills(zeta)), 0.0, width)
    # edge weights (1 - v) phi(a) / phi(zeta) and v phi(b) / phi(zeta)
    log_wa = np.log1p(-v) + e * (a + 0.5 * e)
    gap = e - wf
    wb = np.where(finite, v * np.exp(0.5 * gap * (gap + 2 * (a + wf))), 0.0)
    dz_dm = -np.expm1(log_wa) - wb
    dz_ds = e + a * dz_dm - wb * wf
    z = np.clip(np.where(flip, -(lo2 + s * e), lo2 + s * e), lo, hi)
    dz_ds = np.where(flip, -dz_ds, dz_ds)
    return ad._make(z, (mean, sd), (lambda g: g * dz_dm, lambda g: g * dz_ds))


@dataclass
class GaussianNoise:
    u: np.ndarray  # (B, T, J) uniforms in (0, 1)

    @classmethod
    def draw(cls, rng, B: int, T: int, J: int) -> "GaussianNoise":
        u = rng.uniform(size=(B, T, J))
        return cls(np.clip(u, 1e-15, 1 - 1e-15))


def gaussian_terms(enc: EncoderOutput, model: ConjugateModel, x, noise: GaussianNoise,
                   truncation: tuple | None = None):
    x = np.asarray(x, dtype=float)
    T = noise.u.shape[1]
    mean = ad.expand_dims(enc.mu, 1)
    sd = ad.expand_dims(enc.sigma, 1)
    if truncation is None:
        xi = special.ndtri(noise.u)
        z = mean + sd * xi
    else:
        lo, hi = truncation
        z = _truncated_sample(mean, sd, lo, hi, noise.u)
    if truncation is None:
        log_q = ad.sum_(-0.5 * ad.square(xi) - _LOG_SQRT_2PI - ad.log(sd), axis=-1)
    else:
        log_q = ad.sum_(_truncated_log_density(mean, sd, lo, hi, z), axis=-1)
    log_p = model.log_joint_node(x[:, None, None], z)
    return ad.logsumexp(log_p - log_q, axis=1) - math.log(T)


def gaussian_advi_objective(enc: EncoderOutput, model: ConjugateModel, x, noise: GaussianNoise,
                            truncation: tuple | None = None) -> ObjectiveResult:
    """IWAE for a (optionally truncated) Gaussian posterior, reparameterized."""
    return _masked_total(gaussian_terms(enc, model, x, noise, truncation))
