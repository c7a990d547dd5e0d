"""Normalized B-spline basis densities on a clamped knot vector.

Every basis function B_k is divided by its integral a_k so that each
b_k = B_k / a_k is a probability density on [lo, hi].  Mixtures
``sum_k gamma_k b_k`` with gamma on the simplex are then densities too.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

QUAD_NODES_PER_INTERVAL = 8


class SplineSpaceError(ValueError):
    pass


@dataclass(frozen=True)
class Quadrature:
    """Composite Gauss-Legendre rule, subdivided at every distinct knot."""

    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def on_breaks(cls, breaks: Sequence[float], order: int = QUAD_NODES_PER_INTERVAL) -> "Quadrature":
        breaks = np.asarray(breaks, dtype=float)
        x, w = np.polynomial.legendre.leggauss(order)
        left, right = breaks[:-1, None], breaks[1:, None]
        half = 0.5 * (right - left)
        nodes = (left + right) * 0.5 + half * x[None, :]
        weights = half * w[None, :]
        return cls(nodes.ravel(), weights.ravel())

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.dot(self.weights, f(self.nodes)))


def integrate(q: Quadrature, f: Callable[[np.ndarray], np.ndarray]) -> float:
    """Apply the rule to a vectorized integrand: ``sum_i w_i f(x_i)``."""
    return q.integrate(f)


def _local_basis(knots: np.ndarray, degree: int, z: np.ndarray, lo: float, hi: float):
    """Nonzero B-spline values at flat points ``z`` (local Cox-de Boor).

    Returns ``(first, vals, inside)``: basis ``first + r`` has value
    ``vals[:, r]`` for ``r = 0..degree``.  Intervals are right-continuous
    except the last non-empty one, which also contains ``hi``.
    """
    t = knots
    inside = (z >= lo) & (z <= hi)
    nonempty = np.nonzero(t[1:] > t[:-1])[0]
    span = np.searchsorted(t, np.where(inside, z, lo), side="right") - 1
    span = np.clip(span, nonempty[0], nonempty[-1])
    zz = np.where(inside, z, t[span])
    n = len(z)
    vals = np.zeros((n, degree + 1))
    vals[:, 0] = 1.0
    left = np.empty((n, degree + 1))
    right = np.empty((n, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = zz - t[span + 1 - j]
        right[:, j] = t[span + j] - zz
        saved = np.zeros(n)
        for r in range(j):
            temp = vals[:, r] / (right[:, r + 1] + left[:, j - r])
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        vals[:, j] = saved
    vals *= inside[:, None]
    return span - degree, vals, inside


def _cox_de_boor(knots: np.ndarray, degree: int, z: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """All B-spline basis values of ``degree`` on ``knots`` at points ``z``.

    Returns an array of shape ``z.shape + (len(knots) - degree - 1,)``.
    Intervals are right-continuous except the last non-empty one, which
    also contains ``hi``; points outside ``[lo, hi]`` get all zeros.
    """
    z = np.asarray(z, dtype=float)
    flat = z.ravel()
    n_basis = len(knots) - degree - 1
    first, vals, _ = _local_basis(knots, degree, flat, lo, hi)
    out = np.zeros((len(flat), n_basis))
    cols = first[:, None] + np.arange(degree + 1)
    np.put_along_axis(out, cols, vals, axis=1)
    return out.reshape(z.shape + (n_basis,))


def derivative_matrix(knots: np.ndarray, degree: int) -> np.ndarray:
    """Matrix M with ``B'_degree(z) = M @ B_{degree-1}(z)`` on trimmed knots.

    ``knots`` is a clamped vector carrying ``n = len(knots) - degree - 1``
    basis functions.  The lower-degree basis lives on ``knots[1:-1]`` and has
    ``n - 1`` functions, so M is ``n x (n - 1)`` and lower bidiagonal.
    """
    t = np.asarray(knots, dtype=float)
    n = len(t) - degree - 1
    m = np.zeros((n, n - 1))
    for i in range(n):
        if i >= 1:
            d = t[i + degree] - t[i]
            if d > 0:
                m[i, i - 1] = degree / d
        if i <= n - 2:
            d = t[i + degree + 1] - t[i + 1]
            if d > 0:
                m[i, i] = -degree / d
    return m


@dataclass(frozen=True)
class SplineSpace:
    degree: int
    interior_knots: np.ndarray
    lo: float
    hi: float
    extended_knots: np.ndarray = field(repr=False)
    norm_constants: np.ndarray = field(repr=False)

    @property
    def H(self) -> int:
        return len(self.interior_knots)

    @property
    def K(self) -> int:
        return self.H + self.degree + 1

    @property
    def breaks(self) -> np.ndarray:
        return np.concatenate([[self.lo], self.interior_knots, [self.hi]])

    @property
    def quadrature(self) -> Quadrature:
        return Quadrature.on_breaks(self.breaks)

    def greville(self) -> np.ndarray:
        """Greville abscissae; ``sum_k xi_k B_k(z) = z`` for degree >= 1."""
        t, p = self.extended_knots, self.degree
        if p == 0:
            return 0.5 * (t[:-1] + t[1:])
        return np.array([t[k + 1:k + p + 1].mean() for k in range(self.K)])

    def basis(self, z) -> np.ndarray:
        """Unnormalized B_k(z), shape ``z.shape + (K,)``."""
        return _cox_de_boor(self.extended_knots, self.degree, z, self.lo, self.hi)

    def __call__(self, z) -> np.ndarray:
        return eval_basis(self, z)

    @cached_property
    def _derivative_tables(self) -> dict:
        return {}

    def derivative_coefficients(self, order: int) -> np.ndarray:
        """Rows: coefficients of B_k^(order) in the degree-(p-order) basis on
        the same knot vector (recursive derivative formula)."""
        tables = self._derivative_tables
        if order not in tables:
            t = self.extended_knots
            coef = np.eye(self.K)
            deg = self.degree
            for _ in range(order):
                d = np.zeros((coef.shape[1], len(t) - deg))
                for i in range(coef.shape[1]):
                    w1 = t[i + deg] - t[i]
                    w2 = t[i + deg + 1] - t[i + 1]
                    if w1 > 0:
                        d[i, i] += deg / w1
                    if w2 > 0:
                        d[i, i + 1] -= deg / w2
                coef = coef @ d
                deg -= 1
            coef.setflags(write=False)
            tables[order] = coef
        return tables[order]


def build_spline_space(degree: int, interior_knots: Sequence[float] = (), lo: float = 0.0, hi: float = 1.0) -> SplineSpace:
    if int(degree) != degree or degree < 0:
        raise SplineSpaceError(f"degree must be a nonnegative integer, got {degree!r}")
    degree = int(degree)
    if not lo < hi:
        raise SplineSpaceError(f"need lo < hi, got lo={lo}, hi={hi}")
    knots = np.asarray(list(interior_knots), dtype=float)
    for i, v in enumerate(knots):
        if not np.isfinite(v) or v <= lo or v >= hi:
            raise SplineSpaceError(f"interior knot {i} = {v} lies outside ({lo}, {hi})")
        if i > 0 and v <= knots[i - 1]:
            raise SplineSpaceError(f"interior knot {i} = {v} does not exceed knot {i - 1} = {knots[i - 1]}")
    ext = np.concatenate([np.full(degree + 1, float(lo)), knots, np.full(degree + 1, float(hi))])
    K = len(knots) + degree + 1
    a = (ext[degree + 1:degree + 1 + K] - ext[:K]) / (degree + 1)
    for arr in (knots, ext, a):
        arr.setflags(write=False)
    return SplineSpace(degree, knots, float(lo), float(hi), ext, a)


def equispaced_space(degree: int = 3, H: int = 6, lo: float = 0.0, hi: float = 1.0) -> SplineSpace:
    return build_spline_space(degree, np.linspace(lo, hi, H + 2)[1:-1], lo, hi)


def eval_basis(space: SplineSpace, z) -> np.ndarray:
    """Normalized basis densities b_k(z) = B_k(z) / a_k."""
    return space.basis(z) / space.norm_constants


def eval_basis_diagonal(space: SplineSpace, z) -> np.ndarray:
    """``b_k(z[..., k])`` for every k: each basis at its own column of z."""
    z = np.asarray(z, dtype=float)
    flat = z.reshape(-1)
    first, vals, _ = _local_basis(space.extended_knots, space.degree, flat, space.lo, space.hi)
    k = np.tile(np.arange(space.K), flat.size // space.K)
    r = k - first
    ok = (r >= 0) & (r <= space.degree)
    out = np.where(ok, vals[np.arange(flat.size), np.clip(r, 0, space.degree)], 0.0)
    return (out / np.tile(space.norm_constants, flat.size // space.K)).reshape(z.shape)


def eval_basis_derivative(space: SplineSpace, z, order: int = 1) -> np.ndarray:
    """Pointwise derivatives of b_k via the recursive derivative formula.

    Differentiates the degree-p basis into the degree-(p-1) basis on the
    same (untrimmed) knot vector and evaluates there, one order at a time.
    """
    z = np.asarray(z, dtype=float)
    if order > space.degree:
        return np.zeros(z.shape + (space.K,))
    coef = space.derivative_coefficients(order)
    low = _cox_de_boor(space.extended_knots, space.degree - order, z, space.lo, space.hi)
    return (low @ coef.T) / space.norm_constants


def basis_cdf(space: SplineSpace, k: int, z) -> np.ndarray:
    """CDF of the normalized basis density b_k (1-based ``k``).

    Uses the degree-raising integral identity: the antiderivative of B_k is
    a_k times the sum of degree-(p+1) B-splines with index >= k on the knot
    vector extended by one more copy of each endpoint.
    """
    if not 1 <= k <= space.K:
        raise IndexError(f"basis index {k} out of range 1..{space.K}")
    z = np.clip(np.asarray(z, dtype=float), space.lo, space.hi)
    t = np.concatenate([[space.lo], space.extended_knots, [space.hi]])
    up = _cox_de_boor(t, space.degree + 1, z, space.lo, space.hi)
    # index shift of one: basis k (0-based k-1) maps to raised index k
    out = up[..., k:].sum(axis=-1)
    return np.clip(out, 0.0, 1.0)


def basis_quantile(space: SplineSpace, k: int, u, iters: int = 60) -> np.ndarray:
    """Inverse of ``basis_cdf`` by bisection on the support of b_k: exact draws from uniforms."""
    u = np.asarray(u, dtype=float)
    t = space.extended_knots
    lo = np.full(u.shape, t[k - 1])
    hi = np.full(u.shape, t[k + space.degree])
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = basis_cdf(space, k, mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def penalty_matrix(space: SplineSpace) -> np.ndarray:
    """Roughness penalty ``P[k, l] = int b_k'' b_l''`` on [lo, hi].

    Second derivatives are expressed in the degree-(p-2) basis through two
    derivative matrices; the Gram matrix of that basis is integrated exactly
    by the composite Gauss-Legendre rule.
    """
    p, K = space.degree, space.K
    if p <= 1:
        return np.zeros((K, K))
    t1 = space.extended_knots
    m1 = derivative_matrix(t1, p)
    t2 = t1[1:-1]
    m2 = derivative_matrix(t2, p - 1)
    t3 = t2[1:-1]
    q = space.quadrature
    low = _cox_de_boor(t3, p - 2, q.nodes, space.lo, space.hi)
    gram = (low * q.weights[:, None]).T @ low
    d2 = (m1 @ m2) / space.norm_constants[:, None]
    P = d2 @ gram @ d2.T
    return 0.5 * (P + P.T)
