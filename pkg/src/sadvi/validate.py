"""Property suites behind ``sadvi validate``.

Each check returns a :class:`Check`; a suite passes when all of its checks
do.  The penalty check accepts an injected matrix so a corrupted one can be
shown to fail with the offending entry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import autodiff as ad
from .models import get_model
from .nn import forward_encode, init_encoder, location_scale_inverse
from .objectives import ObjectiveConfig, SplineNoise, sadvi_objective
from .sampling import AnnealingSchedule, BasisBank, MHChainConfig, make_rng, sample_concrete
from .splines import (
    Quadrature,
    SplineSpace,
    basis_cdf,
    equispaced_space,
    eval_basis,
    eval_basis_derivative,
    penalty_matrix,
)

SUITES = ("splines", "sampler", "gradients", "models")


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}" + (f"  ({self.detail})" if self.detail else "")


# -- splines -------------------------------------------------------------------

def check_partition_of_unity(space: SplineSpace, n: int = 1000, tol: float = 1e-12) -> Check:
    z = np.linspace(space.lo, space.hi, n)
    err = float(np.abs(space.basis(z).sum(-1) - 1.0).max())
    return Check(f"partition of unity (H={space.H}, degree={space.degree})", err < tol, f"max err {err:.2e}")


def check_basis_normalization(space: SplineSpace, tol: float = 1e-12) -> Check:
    mass = space.quadrature.weights @ eval_basis(space, space.quadrature.nodes)
    err = np.abs(mass - 1.0)
    k = int(np.argmax(err))
    return Check(f"basis densities integrate to 1 (H={space.H}, degree={space.degree})", bool(err[k] < tol),
                 f"max err {err[k]:.2e} at k={k + 1}")


def brute_force_penalty(space: SplineSpace, nodes_per_interval: int = 20) -> np.ndarray:
    """``int b_k'' b_l''`` from pointwise second derivatives on a finer rule."""
    q = Quadrature.on_breaks(space.breaks, nodes_per_interval)
    d2 = eval_basis_derivative(space, q.nodes, 2)
    return (d2 * q.weights[:, None]).T @ d2


def check_penalty(space: SplineSpace, P: np.ndarray | None = None, tol: float = 1e-8,
                  eig_tol: float = 1e-9) -> list[Check]:
    """Entrywise agreement with brute-force quadrature, symmetry, PSD."""
    P = penalty_matrix(space) if P is None else np.asarray(P, dtype=float)
    ref = brute_force_penalty(space)
    # relative to the matrix scale: entries reach ~1e6 for fine knots
    scale = max(1.0, float(np.abs(ref).max()))
    diff = np.abs(P - ref) / scale
    k, l = np.unravel_index(int(np.argmax(diff)), diff.shape)
    tag = f"H={space.H}, degree={space.degree}"
    out = [Check(f"penalty matches quadrature ({tag})", bool(diff[k, l] < tol),
                 f"worst entry ({k}, {l}): {P[k, l]:.6g} vs {ref[k, l]:.6g}, scaled err {diff[k, l]:.2e}")]
    asym = np.abs(P - P.T)
    i, j = np.unravel_index(int(np.argmax(asym)), asym.shape)
    out.append(Check(f"penalty symmetric ({tag})", bool(asym[i, j] <= tol * scale), f"worst entry ({i}, {j})"))
    lam_min = float(np.linalg.eigvalsh(0.5 * (P + P.T)).min()) / scale
    out.append(Check(f"penalty positive semidefinite ({tag})", lam_min >= -eig_tol, f"min eig / scale {lam_min:.2e}"))
    return out


def splines_suite() -> list[Check]:
    out = []
    for degree in (0, 1, 2, 3):
        for H in (0, 3, 6, 9):
            space = equispaced_space(degree, H)
            out.append(check_partition_of_unity(space))
            out.append(check_basis_normalization(space))
    for H in (0, 3, 6, 9):
        out.extend(check_penalty(equispaced_space(3, H)))
    for degree in (0, 1):
        P = penalty_matrix(equispaced_space(degree, 6))
        out.append(Check(f"penalty is zero for degree {degree}", bool(np.all(P == 0))))
    space = equispaced_space(3, 6)
    z = np.linspace(0, 1, 501)
    worst = 0.0
    for k in range(1, space.K + 1):
        F = basis_cdf(space, k, z)
        worst = max(worst, abs(F[0]), abs(F[-1] - 1.0), float(max(0.0, -np.diff(F).min())))
    out.append(Check("basis CDFs run from 0 to 1 and never decrease", worst < 1e-12, f"worst {worst:.2e}"))
    return out


# -- sampler -------------------------------------------------------------------

def ks_statistic(draws: np.ndarray, cdf) -> float:
    x = np.sort(draws)
    n = len(x)
    F = cdf(x)
    i = np.arange(1, n + 1)
    return float(max((i / n - F).max(), (F - (i - 1) / n).max()))


def mh_ks(space: SplineSpace, n: int = 100_000, seed: int = 0) -> np.ndarray:
    """KS distance of n MH draws to each basis CDF."""
    bank = BasisBank(space, MHChainConfig(), make_rng(seed, 3), size=n, n_chains=512)
    return np.array([ks_statistic(bank.draws[:, k], lambda z, k=k: basis_cdf(space, k + 1, z))
                     for k in range(space.K)])


def concrete_argmax_error(gamma: np.ndarray, temperature: float = 0.01, n: int = 100_000, seed: int = 0) -> float:
    with np.errstate(divide="ignore"):
        logw = np.log(np.broadcast_to(gamma, (n, len(gamma))))
    u, _ = sample_concrete(logw, temperature, make_rng(seed, 7))
    freq = np.bincount(np.argmax(u, axis=-1), minlength=len(gamma)) / n
    return float(np.abs(freq - gamma).max())


def sampler_suite(n: int = 100_000) -> list[Check]:
    space = equispaced_space(3, 6)
    ks = mh_ks(space, n)
    k = int(np.argmax(ks))
    out = [Check(f"MH draws match basis CDFs (KS < 0.02, n={n})", bool(ks[k] < 0.02), f"max KS {ks[k]:.4f} at k={k + 1}")]
    gamma = np.array([0.05, 0.1, 0.2, 0.3, 0.05, 0.1, 0.05, 0.05, 0.05, 0.05])
    err = concrete_argmax_error(gamma, 0.01, n)
    out.append(Check("concrete argmax frequencies match weights (±0.01)", err <= 0.01, f"max abs dev {err:.4f}"))
    ok = True
    for kind, rate in (("exponential", 4.0), ("linear", 10.0)):
        s = AnnealingSchedule(kind, 1.0, 0.05, rate)
        vals = np.array([s(c) for c in range(60)])
        ok &= bool(np.all(np.diff(vals) <= 0) and vals[0] == 1.0 and abs(vals[-1] - 0.05) < 1e-5)
    out.append(Check("annealing schedules start at lambda0, decrease, reach lambda1", ok))
    return out


# -- gradients -----------------------------------------------------------------

@dataclass
class GradientProblem:
    """A fixed-noise penalized objective as a function of the encoder weights."""

    params: object
    model: object
    space: SplineSpace
    x: np.ndarray
    cfg: ObjectiveConfig
    temperature: float
    noise: SplineNoise
    P: np.ndarray

    def value(self, flat: np.ndarray) -> float:
        p = self.params.copy()
        p.set_flat(flat)
        enc = forward_encode(p, self.x)
        return float(sadvi_objective(enc, self.model, self.x, self.space, self.cfg, self.temperature,
                                     self.noise, self.P).total)

    def gradient(self) -> np.ndarray:
        tape = ad.Tape()
        enc = forward_encode(self.params, self.x, tape)
        res = sadvi_objective(enc, self.model, self.x, self.space, self.cfg, self.temperature, self.noise, self.P)
        grads = ad.grad(res.total, [enc.leaves[k] for k in self.params.names])
        return np.concatenate([g.ravel() for g in grads])


def gradient_problem(seed: int, case_id: int | None = None, B: int = 4, T: int = 3,
                     hidden: int = 5, H: int = 6) -> GradientProblem:
    """Small random instance: every objective term (IWAE, penalty, anti-collapse) is active."""
    rng = make_rng(seed, 11)
    case_id = case_id or 1 + seed % 5
    model = get_model(case_id)
    space = equispaced_space(3, H)
    x, _ = model.sample(rng, B)
    params = init_encoder(rng, J=1, K=space.K, hidden=hidden, x_shift=float(x.mean()),
                          x_scale=float(x.std()) or 1.0, support=model.support)
    # jitter every weight: zero biases make gamma exactly uniform whenever x equals the
    # batch mean, which sits on the anti-collapse floor where the objective has a kink
    params.set_flat(params.flat() + 0.1 * rng.normal(size=params.size))
    # keep the spline support where the joint density is finite
    lo, hi = model.prior_interval(0.05)
    a, b = location_scale_inverse(lo, hi - lo, params.support)
    params.weights["b3"][:2] = a, b
    bank = BasisBank(space, MHChainConfig(), make_rng(seed, 12), size=256, n_chains=64)
    noise = SplineNoise.draw(rng, bank, B, T, 1)
    cfg = ObjectiveConfig(T=T, lam=1e-6, kappa=1e-2, stl=False)
    return GradientProblem(params, model, space, x, cfg, 0.5, noise, penalty_matrix(space))


def finite_difference(f, x0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x0`` (any shape)."""
    x0 = np.asarray(x0, dtype=float)
    g = np.empty_like(x0)
    for i in np.ndindex(x0.shape):
        e = np.zeros_like(x0)
        e[i] = h
        g[i] = (f(x0 + e) - f(x0 - e)) / (2 * h)
    return g


def gradient_relative_error(problem: GradientProblem, h: float = 1e-6) -> float:
    """``||g_tape - g_fd|| / max(||g_tape||, ||g_fd||)``."""
    g = problem.gradient()
    fd = finite_difference(problem.value, problem.params.flat(), h)
    denom = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-300)
    return float(np.linalg.norm(g - fd) / denom)


def gradients_suite(n_seeds: int = 10, tol: float = 1e-4) -> list[Check]:
    errs = [gradient_relative_error(gradient_problem(s)) for s in range(n_seeds)]
    worst = int(np.argmax(errs))
    return [Check(f"tape gradient matches central differences ({n_seeds} seeds, rel err < {tol:g})",
                  errs[worst] < tol, f"worst {errs[worst]:.2e} at seed {worst}")]


# -- models --------------------------------------------------------------------

def _integrate_joint(model, x) -> float:
    """log of ``int p(x, z) dz`` by adaptive quadrature around the posterior."""
    from scipy.integrate import quad

    lo, hi = model.posterior_interval(x, 1e-12)
    ref = model.log_marginal(x)
    val, _ = quad(lambda z: math.exp(float(model.log_joint(x, z)) - ref), lo, hi, limit=200, epsabs=1e-13)
    return ref + math.log(val)


def models_suite() -> list[Check]:
    out = []
    for case in range(1, 6):
        m = get_model(case)
        worst_lm = worst_post = 0.0
        for x in m.probe_x:
            worst_lm = max(worst_lm, abs(_integrate_joint(m, x) - m.log_marginal(x)))
            z = np.linspace(*m.posterior_interval(x, 1e-4), 64)
            lp = m.log_joint(x, z) - m.log_marginal(x)
            worst_post = max(worst_post, float(np.abs(np.exp(lp) - m.posterior_pdf(x, z)).max()))
        out.append(Check(f"case {case}: log marginal equals log of integrated joint", worst_lm < 1e-8,
                         f"max err {worst_lm:.2e}"))
        out.append(Check(f"case {case}: posterior equals joint / marginal", worst_post < 1e-8,
                         f"max err {worst_post:.2e}"))
        rng = make_rng(case, 21)
        x, z = m.sample(rng, 20000)
        pr = m.prior()
        ks = stats.kstest(z, pr.cdf).statistic
        out.append(Check(f"case {case}: ancestral z follows the prior", ks < 0.02, f"KS {ks:.4f}"))
    return out


def run_suite(name: str) -> list[Check]:
    names = SUITES if name == "all" else (name,)
    out = []
    for n in names:
        if n not in SUITES:
            raise ValueError(f"unknown suite {n!r}; expected one of {SUITES + ('all',)}")
        out.extend(globals()[f"{n}_suite"]())
    return out
