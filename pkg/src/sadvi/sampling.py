"""Draws from spline mixtures via per-basis MCMC plus a concrete relaxation.

A mixture draw is built in three steps: take one sample ``w_k`` from each
basis density b_k (Metropolis-Hastings), draw relaxed one-hot weights ``u``
from a concrete distribution over the mixture coefficients, and combine
``eps = sum_k u_k w_k``.  Only ``u`` depends on trainable quantities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .splines import SplineSpace, eval_basis, eval_basis_diagonal

LOG_WEIGHT_FLOOR = -30.0


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for ``seed`` and an optional stream path."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass(frozen=True)
class AnnealingSchedule:
    kind: str = "exponential"
    lambda0: float = 1.0
    lambda1: float = 0.05
    rate: float = 4.0

    def __post_init__(self):
        if self.kind not in ("exponential", "linear"):
            raise ValueError(f"unknown annealing kind {self.kind!r}")
        if not self.lambda0 >= self.lambda1 > 0:
            raise ValueError("need lambda0 >= lambda1 > 0")
        if not self.rate > 0:
            raise ValueError("annealing rate must be positive")

    def __call__(self, epoch: float) -> float:
        return anneal(self, epoch)


def anneal(schedule: AnnealingSchedule, c: float) -> float:
    """Temperature at epoch ``c``."""
    l0, l1, r = schedule.lambda0, schedule.lambda1, schedule.rate
    if schedule.kind == "exponential":
        return l1 + (l0 - l1) * math.exp(-c / r)
    if c <= r:
        return l0 - (l0 - l1) * c / r
    return l1


@dataclass(frozen=True)
class MHChainConfig:
    burn_in: int = 50
    thin: int = 5

    def __post_init__(self):
        if self.burn_in < 0 or self.thin < 1:
            raise ValueError("need burn_in >= 0 and thin >= 1")


class MHChains:
    """Independence Metropolis-Hastings chains targeting every basis density.

    Holds ``n_chains`` parallel chains for each of the K bases of ``space``
    (which must live on [0, 1]); proposals are Uniform[0, 1], so the
    acceptance probability reduces to ``min(1, b_k(z') / b_k(z))``.  Chains
    start at each basis mode and keep their state between calls.
    """

    def __init__(self, space: SplineSpace, cfg: MHChainConfig, rng: np.random.Generator, n_chains: int = 1):
        self.space = space
        self.cfg = cfg
        self.rng = rng
        self.n_chains = n_chains
        K = space.K
        grid = np.linspace(space.lo, space.hi, 2049)
        modes = grid[np.argmax(eval_basis(space, grid), axis=0)]
        self.state = np.broadcast_to(modes, (n_chains, K)).copy()
        self.density = self._target(self.state)
        self.n_steps = 0
        self.n_accepted = 0
        self.burned_in = False

    def _target(self, z: np.ndarray) -> np.ndarray:
        return eval_basis_diagonal(self.space, z)

    def step(self):
        prop = self.rng.uniform(self.space.lo, self.space.hi, size=self.state.shape)
        dens = self._target(prop)
        u = self.rng.uniform(size=self.state.shape)
        # u * b(z) < b(z') <=> u < b(z') / b(z); avoids dividing by zero
        accept = u * self.density < dens
        self.state = np.where(accept, prop, self.state)
        self.density = np.where(accept, dens, self.density)
        self.n_steps += accept.size
        self.n_accepted += int(accept.sum())

    def sample(self, n: int) -> np.ndarray:
        """``n`` further draws for every basis, shape ``(n, K)``."""
        if not self.burned_in:
            for _ in range(self.cfg.burn_in):
                self.step()
            self.burned_in = True
        rounds = -(-n // self.n_chains)
        out = np.empty((rounds * self.n_chains, self.space.K))
        for r in range(rounds):
            for _ in range(self.cfg.thin):
                self.step()
            out[r * self.n_chains:(r + 1) * self.n_chains] = self.state
        return out[:n]

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / max(self.n_steps, 1)


def mh_sample_basis(chains: MHChains, k: int) -> float:
    """One more draw from basis ``k`` (1-based), continuing its chain."""
    return float(chains.sample(1)[0, k - 1])


class BasisBank:
    """Pool of MCMC draws per basis; training picks from it uniformly.

    ``refresh`` advances the chains and replaces the pool, so a long run
    keeps consuming fresh chain output.
    """

    def __init__(self, space: SplineSpace, cfg: MHChainConfig, rng: np.random.Generator,
                 size: int = 2048, n_chains: int = 512):
        self.chains = MHChains(space, cfg, rng, n_chains=n_chains)
        self.size = size
        self.rng = rng
        self.refresh()

    def refresh(self):
        self.draws = self.chains.sample(self.size)

    def pick(self, shape: tuple) -> np.ndarray:
        """Random picks, shape ``shape + (K,)``; column k holds draws of b_k."""
        K = self.draws.shape[1]
        idx = self.rng.integers(0, self.size, size=shape + (K,))
        return self.draws[idx, np.arange(K)]


def gumbel(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    u = rng.uniform(size=shape)
    u = np.clip(u, np.finfo(float).tiny, 1.0)
    return -np.log(-np.log(u))


def concrete(log_weights, temperature: float, noise: np.ndarray):
    """Relaxed one-hot ``softmax((max(log w, floor) + G) / temperature)``.

    Works on arrays or tape nodes; ``noise`` is the standard Gumbel draw,
    kept by the caller so the sample can be replayed.
    """
    logits = ad.floor_at(log_weights, LOG_WEIGHT_FLOOR)
    return ad.softmax((logits + noise) / temperature, axis=-1)


def sample_concrete(log_weights, temperature: float, rng: np.random.Generator):
    """Draw from the concrete distribution; returns ``(u, gumbel_noise)``."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    g = gumbel(rng, ad.value(log_weights).shape)
    return concrete(log_weights, temperature, g), g


def relaxed_epsilon(log_weights, temperature: float, gumbel_noise: np.ndarray, w: np.ndarray):
    """``eps = sum_k u_k w_k`` with ``u`` the concrete relaxation; also returns u."""
    u = concrete(log_weights, temperature, gumbel_noise)
    return ad.sum_(u * w, axis=-1), u


def sample_epsilon(gamma_row, space: SplineSpace, temperature: float, bank: BasisBank,
                   rng: np.random.Generator, size: tuple = ()):
    """Relaxed mixture draw(s) for simplex weights ``gamma_row``.

    Returns ``(eps, u, w)``.  ``size`` prepends sample dimensions.
    """
    gamma_row = np.asarray(gamma_row, dtype=float)
    shape = tuple(size) + gamma_row.shape[:-1]
    w = bank.pick(shape)
    with np.errstate(divide="ignore"):
        logw = np.log(gamma_row)
    g = gumbel(rng, shape + (space.K,))
    eps, u = relaxed_epsilon(logw, temperature, g, w)
    return eps, u, w
