"""Amortized training loop, evaluation at probe points, and sweeps."""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .config import ConfigError, RunConfig
from .evaluation import EvalReport, eval_grid_for, kl_estimate, rise
from .models import ConjugateModel, generate_dataset, get_model
from .nn import Adam, EncoderParams, TrainingStepError, forward_encode, init_encoder, location_scale_inverse
from .objectives import (
    GaussianNoise,
    GaussianPosteriorParams,
    ObjectiveConfig,
    SplineNoise,
    SplinePosteriorParams,
    gaussian_terms,
    iwae_terms,
    sadvi_objective,
    gaussian_advi_objective,
)
from .sampling import AnnealingSchedule, BasisBank, MHChainConfig, make_rng
from .splines import SplineSpace, equispaced_space, penalty_matrix

METHODS = ("sadvi", "gaussian", "truncated-gaussian")
SWEEP_AXES = ("obj.lambda", "anneal.rate", "obj.T", "spline.H", "anneal.kind")
UNSTABLE_SKIP_FRACTION = 0.10
BANK_CHAINS = 512

# independent random streams per run seed
STREAM_DATA, STREAM_INIT, STREAM_NOISE, STREAM_MH, STREAM_SHUFFLE, STREAM_EVAL = range(6)


def resolve_method(method: str, model: ConjugateModel, cfg: RunConfig) -> str:
    """Map ``baseline`` to the configured Gaussian variant; validate names."""
    if method == "baseline":
        kind = cfg["baseline.kind"]
        if kind == "auto":
            return "truncated-gaussian" if model.bounded_support else "gaussian"
        return kind
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS + ('baseline',)}")
    return method


def _init_heads(params: EncoderParams, model: ConjugateModel, method: str):
    """Start every posterior at a prior-covering location and scale.

    Spline posteriors start on the central 99.8% prior interval, Gaussian
    ones at the prior mean and sd.  Without this a random start can put the
    whole variational support where the joint density is zero, which
    leaves no finite objective to climb.
    """
    J = params.J
    b3 = params.weights["b3"]
    if method == "sadvi":
        lo, hi = model.prior_interval(1e-3)
        loc, scale = lo, hi - lo
    else:
        pr = model.prior()
        loc, scale = float(pr.mean()), float(pr.std())
    a, b = location_scale_inverse(loc, scale, params.support)
    b3[:J] = a
    b3[J:2 * J] = b


@dataclass
class TrainedModel:
    """A fitted amortized posterior for one case and method."""

    method: str
    model: ConjugateModel
    params: EncoderParams
    space: SplineSpace | None = None
    truncation: tuple | None = None
    bank: BasisBank | None = field(default=None, repr=False)

    def posterior(self, x: float):
        enc = forward_encode(self.params, np.array([float(x)]))
        mu, sigma = enc.mu[0], enc.sigma[0]
        if self.method == "sadvi":
            return SplinePosteriorParams(mu, sigma, enc.gamma[0])
        return GaussianPosteriorParams(mu, sigma, self.truncation)

    def posterior_pdf(self, x: float, j: int = 0):
        post = self.posterior(x)
        if self.method == "sadvi":
            return lambda z: post.marginal_pdf(self.space, z, j)
        return lambda z: post.marginal_pdf(z, j)

    def support(self, x: float, j: int = 0) -> tuple[float, float]:
        return self.posterior(x).support(j)

    def breaks(self, x: float, j: int = 0) -> np.ndarray:
        """Points where the fitted density may have kinks or jumps."""
        post = self.posterior(x)
        if self.method == "sadvi":
            return post.mu[j] + post.sigma[j] * self.space.breaks
        lo, hi = post.support(j)
        return np.array([v for v in (lo, hi) if np.isfinite(v)])

    def iwae_estimates(self, x: float, T: int, n_rep: int, rng: np.random.Generator) -> np.ndarray:
        """``n_rep`` independent T-sample IWAE estimates of log p(x).

        Spline posteriors are sampled exactly (categorical component choice
        over fresh inverse-CDF basis draws), so each estimate is a genuine
        stochastic lower bound.  Reusing the finite MH bank across many
        repetitions would share its sampling error between all of them.
        """
        xs = np.full(n_rep, float(x))
        enc = forward_encode(self.params, xs)
        J = self.params.J
        if self.method == "sadvi":
            noise = SplineNoise.draw_exact(rng, self.space, n_rep, T, J)
            return np.asarray(iwae_terms(enc, self.model, xs, self.space, 1.0, noise, exact=True))
        noise = GaussianNoise.draw(rng, n_rep, T, J)
        return np.asarray(gaussian_terms(enc, self.model, xs, noise, self.truncation))


@dataclass
class FitResult:
    trained: TrainedModel
    trace: list              # per-epoch mean objective per usable example
    steps: int
    skipped_steps: int
    bad_examples: int
    runtime_s: float

    @property
    def unstable(self) -> bool:
        return self.skipped_steps > UNSTABLE_SKIP_FRACTION * max(self.steps, 1)


def training_data(cfg: RunConfig, model: ConjugateModel, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``(x, z)`` sample a run with this seed trains on."""
    return generate_dataset(model, cfg["case.n"], make_rng(seed, STREAM_DATA))


def fit(cfg: RunConfig, model: ConjugateModel | None = None, method: str = "sadvi", seed: int = 0,
        callback=None) -> FitResult:
    """Train the amortized posterior for one (config, method, seed).

    ``callback(epoch, trained)`` runs after every epoch, e.g. for plots.
    """
    t0 = time.perf_counter()
    model = model or get_model(cfg["case.id"], cfg["case5.as_variance"])
    method = resolve_method(method, model, cfg)
    J = cfg["latent.J"]
    if J != model.latent_dim:
        raise ConfigError(f"latent.J = {J} but case {model.case_id} has {model.latent_dim} latent(s)")
    x_all, _ = training_data(cfg, model, seed)
    shift = float(x_all.mean())
    scale = float(x_all.std()) or 1.0

    space = bank = P = None
    truncation = None
    if method == "sadvi":
        space = equispaced_space(cfg["spline.degree"], cfg.H)
        K = space.K
        P = penalty_matrix(space)
        bank = BasisBank(space, MHChainConfig(cfg["mh.burn_in"], cfg["mh.thin"]), make_rng(seed, STREAM_MH),
                         size=cfg["mh.bank"], n_chains=min(BANK_CHAINS, cfg["mh.bank"]))
    else:
        K = 0
        if method == "truncated-gaussian":
            truncation = tuple(float(v) for v in model.support)
    init_seed = seed if cfg["net.seed"] == "auto" else cfg["net.seed"]
    # spline supports stay inside the model support; Gaussians use truncation instead
    support = model.support if method == "sadvi" else (-np.inf, np.inf)
    params = init_encoder(make_rng(init_seed, STREAM_INIT), J=J, K=K, hidden=cfg["net.hidden"],
                          x_shift=shift, x_scale=scale, support=support)
    _init_heads(params, model, method)

    obj_cfg = ObjectiveConfig(T=cfg["obj.T"], lam=cfg["obj.lambda"], kappa=cfg["obj.kappa"],
                              stl=cfg["obj.estimator"] in ("stl", "stl-hard"), hard=cfg["obj.estimator"] == "stl-hard")
    schedule = AnnealingSchedule(cfg["anneal.kind"], cfg["anneal.lambda0"], cfg["anneal.lambda1"], cfg["anneal.rate"])
    opt = Adam(lr=cfg["opt.lr"], decay=cfg["opt.decay"])
    noise_rng = make_rng(seed, STREAM_NOISE)
    shuffle_rng = make_rng(seed, STREAM_SHUFFLE)
    batch = cfg["train.batch"]
    n = len(x_all)
    names = params.names
    trace, steps, skipped, bad = [], 0, 0, 0

    for epoch in range(cfg["train.epochs"]):
        temperature = schedule(epoch)
        if bank is not None and epoch > 0:
            bank.refresh()
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, batch):
            xb = x_all[order[start:start + batch]]
            steps += 1
            tape = ad.Tape()
            try:
                enc = forward_encode(params, xb, tape)
            except TrainingStepError:
                skipped += 1
                continue
            if method == "sadvi":
                noise = SplineNoise.draw(noise_rng, bank, len(xb), obj_cfg.T, J)
                res = sadvi_objective(enc, model, xb, space, obj_cfg, temperature, noise, P)
            else:
                noise = GaussianNoise.draw(noise_rng, len(xb), obj_cfg.T, J)
                res = gaussian_advi_objective(enc, model, xb, noise, truncation)
            bad += res.n_bad
            if not res.usable.any() or not isinstance(res.total, ad.Node):
                skipped += 1
                continue
            grads = ad.grad(res.total, [enc.leaves[k] for k in names])
            if not opt.step(params.weights, {k: -g for k, g in zip(names, grads)}):
                skipped += 1
                continue
            total += float(res.per_example[res.usable].sum())
            count += int(res.usable.sum())
        opt.end_epoch()
        trace.append(total / count if count else float("nan"))
        if callback is not None:
            callback(epoch, TrainedModel(method, model, params, space, truncation, bank))

    trained = TrainedModel(method, model, params, space, truncation, bank)
    return FitResult(trained, trace, steps, skipped, bad, time.perf_counter() - t0)


def evaluate(trained: TrainedModel, x: float, grid_n: int = 4096, tail: float = 1e-6) -> tuple[float, float]:
    """RISE and KL of the fitted posterior against the exact one at ``x``."""
    model = trained.model
    grid = eval_grid_for(model.posterior_interval(x, tail), trained.support(x), grid_n, trained.breaks(x))
    q_pdf = trained.posterior_pdf(x)
    p_pdf = model.posterior(x).pdf
    return rise(q_pdf, p_pdf, grid), kl_estimate(q_pdf, p_pdf, grid)


def train_case(cfg: RunConfig, model: ConjugateModel | None = None, method: str = "sadvi",
               seed: int = 0, probe_x: Sequence[float] | None = None) -> list[EvalReport]:
    """Train once and report RISE / KL at each probe x of the case."""
    model = model or get_model(cfg["case.id"], cfg["case5.as_variance"])
    res = fit(cfg, model, method, seed)
    xs = model.probe_x if probe_x is None else probe_x
    tr = res.trained
    out = []
    for x in xs:
        r, kl = evaluate(tr, x, cfg["eval.grid_n"], cfg["eval.tail"])
        out.append(EvalReport(
            case=model.case_id, method=tr.method, x=float(x), seed=seed,
            H=tr.space.H if tr.space is not None else 0,
            degree=tr.space.degree if tr.space is not None else 0,
            T=cfg["obj.T"], lam=cfg["obj.lambda"] if tr.method == "sadvi" else 0.0,
            rise=r, kl=kl, runtime_s=res.runtime_s, skipped_steps=res.skipped_steps,
            bad_examples=res.bad_examples, unstable=res.unstable, trace=list(res.trace),
        ))
    return out


def _train_task(task):
    cfg, method, seed = task
    return train_case(cfg, None, method, seed)


def run_replicates(cfg: RunConfig, methods: Sequence[str], jobs: int = 1,
                   seeds: Sequence[int] | None = None) -> list[EvalReport]:
    """All (method, replicate) runs for ``cfg``; order is independent of ``jobs``."""
    if seeds is None:
        seeds = [cfg["seed.base"] + r for r in range(cfg["train.replicates"])]
    tasks = [(cfg, m, s) for m in methods for s in seeds]
    return [r for block in map_tasks(_train_task, tasks, jobs) for r in block]


def map_tasks(fn, tasks: list, jobs: int = 1) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def sweep(cfg: RunConfig, axis: str, values: Sequence, methods: Sequence[str] = ("sadvi",),
          jobs: int = 1) -> list[tuple[object, EvalReport]]:
    """One replicate batch per axis value, with the same seeds in every batch."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    cells = [cfg.with_values({axis: v}) for v in values]
    seeds = [cfg["seed.base"] + r for r in range(cfg["train.replicates"])]
    tasks = [(c, m, s) for c in cells for m in methods for s in seeds]
    blocks = map_tasks(_train_task, tasks, jobs)
    per_value = len(methods) * len(seeds)
    out = []
    for i, block in enumerate(blocks):
        v = cells[i // per_value][axis]
        out.extend((v, r) for r in block)
    return out
