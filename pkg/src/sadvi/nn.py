"""Two-hidden-layer MLP encoder and an Adam optimizer on plain arrays."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

SIGMA_FLOOR = 1e-4


class TrainingStepError(FloatingPointError):
    def __init__(self, msg: str, param: str | None = None):
        super().__init__(msg)
        self.param = param


@dataclass
class EncoderParams:
    """MLP weights plus a fixed input standardization.

    Output layout per example: ``J`` locations, ``J`` pre-scales, then
    ``J * K`` coefficient logits (``K = 0`` for Gaussian heads).
    """

    weights: dict[str, np.ndarray]
    J: int
    K: int
    x_shift: float = 0.0
    x_scale: float = 1.0
    support: tuple = (-np.inf, np.inf)

    @property
    def names(self) -> list[str]:
        return list(self.weights)

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.weights.items()}, self.J, self.K,
                             self.x_shift, self.x_scale, self.support)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.weights.values()])

    def set_flat(self, vec: np.ndarray):
        i = 0
        for k, v in self.weights.items():
            n = v.size
            self.weights[k] = vec[i:i + n].reshape(v.shape).copy()
            i += n

    @property
    def size(self) -> int:
        return sum(v.size for v in self.weights.values())


def init_encoder(rng: np.random.Generator, J: int = 1, K: int = 10, hidden: int = 20,
                 x_shift: float = 0.0, x_scale: float = 1.0, d_in: int = 1,
                 support: tuple = (-np.inf, np.inf)) -> EncoderParams:
    """Uniform fan-in weights, zero biases.

    A finite ``support`` keeps ``[mu, mu + sigma]`` inside it (see
    ``location_scale``); use it only for densities with bounded support.
    """
    sizes = [d_in, hidden, hidden, 2 * J + J * K]
    w = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        lim = 1.0 / np.sqrt(a)
        w[f"W{i}"] = rng.uniform(-lim, lim, size=(a, b))
        w[f"b{i}"] = np.zeros(b)
    return EncoderParams(w, J, K, float(x_shift), float(x_scale), tuple(map(float, support)))


def positive_link(s):
    return ad.softplus(s) + SIGMA_FLOOR


def location_scale(a, b, support: tuple = (-np.inf, np.inf)):
    """Map raw outputs to ``(mu, sigma)`` with ``[mu, mu + sigma]`` in ``support``.

    Unbounded: identity location, softplus scale.  Bounded below: the
    location is shifted by a softplus.  Bounded above: the right end sits a
    softplus below ``hi``.  Bounded on both sides: sigmoids place the left
    end and then the fraction of the remaining room that sigma takes.
    Sigma never drops below ``SIGMA_FLOOR``.
    """
    lo, hi = support
    if np.isfinite(lo) and np.isfinite(hi):
        f = SIGMA_FLOOR
        mu = lo + (hi - lo - f) * ad.sigmoid(a)
        return mu, f + (hi - mu - f) * ad.sigmoid(b)
    if np.isfinite(lo):
        return lo + ad.softplus(a), positive_link(b)
    sigma = positive_link(b)
    if np.isfinite(hi):
        return hi - ad.softplus(a) - sigma, sigma
    return a, sigma


def location_scale_inverse(mu: float, sigma: float, support: tuple = (-np.inf, np.inf)) -> tuple[float, float]:
    """Raw outputs that ``location_scale`` maps to ``(mu, sigma)``."""
    lo, hi = support

    def softplus_inv(y):
        return y + math.log(-math.expm1(-y))

    def logit(p):
        return math.log(p) - math.log1p(-p)

    if np.isfinite(lo) and np.isfinite(hi):
        f = SIGMA_FLOOR
        return logit((mu - lo) / (hi - lo - f)), logit((sigma - f) / (hi - mu - f))
    b = softplus_inv(sigma - SIGMA_FLOOR)
    if np.isfinite(lo):
        return softplus_inv(mu - lo), b
    if np.isfinite(hi):
        return softplus_inv(hi - mu - sigma), b
    return mu, b


@dataclass
class EncoderOutput:
    mu: object         # (B, J)
    sigma: object      # (B, J)
    log_gamma: object  # (B, J, K) or None
    gamma: object      # (B, J, K) or None
    leaves: dict = field(default_factory=dict)


def forward_encode(params: EncoderParams, x, tape: ad.Tape | None = None) -> EncoderOutput:
    """Run the encoder on a batch ``x`` (shape (B,) or (B, d_in)).

    With a tape, the weights are recorded as leaves (``out.leaves``) and
    every output is a Node; without one, plain arrays come back.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    x = (x - params.x_shift) / params.x_scale
    if tape is not None:
        leaves = {k: tape.variable(v) for k, v in params.weights.items()}
    else:
        leaves = dict(params.weights)
    h = ad.elu(ad.matmul(x, leaves["W1"]) + leaves["b1"])
    h = ad.elu(ad.matmul(h, leaves["W2"]) + leaves["b2"])
    out = ad.matmul(h, leaves["W3"]) + leaves["b3"]
    J, K = params.J, params.K
    B = x.shape[0]
    mu, sigma = location_scale(out[:, :J], out[:, J:2 * J], params.support)
    log_gamma = gamma = None
    if K:
        logits = ad.reshape(out[:, 2 * J:], (B, J, K))
        log_gamma = ad.log_softmax(logits, axis=-1)
        gamma = ad.softmax(logits, axis=-1)
    for name, node in (("mu", mu), ("sigma", sigma)):
        if not np.all(np.isfinite(ad.value(node))):
            raise TrainingStepError(f"non-finite encoder output {name}", name)
    return EncoderOutput(mu, sigma, log_gamma, gamma, leaves if tape is not None else {})


class Adam:
    def __init__(self, lr: float = 0.01, decay: float = 0.05, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.decay = decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.skipped = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> bool:
        """Descend on ``grads`` in place; returns False if the step was skipped."""
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            return False
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
        return True

    def end_epoch(self):
        self.lr *= 1.0 - self.decay


def adam_step(state: Adam, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> bool:
    return state.step(params, grads)
