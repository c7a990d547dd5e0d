"""Encoder heads, support links and the Adam optimizer."""
import numpy as np
import pytest

from sadvi import autodiff as ad
from sadvi.nn import (
    SIGMA_FLOOR,
    Adam,
    TrainingStepError,
    adam_step,
    forward_encode,
    init_encoder,
    location_scale,
    location_scale_inverse,
    positive_link,
)
from sadvi.sampling import make_rng
from sadvi.validate import finite_difference


def zero_params(J=2, K=5):
    p = init_encoder(make_rng(0), J=J, K=K, hidden=4)
    for v in p.weights.values():
        v[...] = 0.0
    return p


class TestForwardEncode:
    def test_zero_weights_uniform_rows(self):
        out = forward_encode(zero_params(), np.array([0.3, -1.0]))
        np.testing.assert_allclose(out.gamma, 0.2, atol=1e-15)
        np.testing.assert_allclose(out.sigma, positive_link(0.0), atol=1e-15)
        np.testing.assert_allclose(out.mu, 0.0)

    def test_rows_sum_to_one(self):
        p = init_encoder(make_rng(1), J=3, K=7, hidden=6)
        out = forward_encode(p, make_rng(2).normal(size=40) * 10)
        np.testing.assert_allclose(out.gamma.sum(-1), 1.0, atol=1e-14)
        np.testing.assert_allclose(np.exp(out.log_gamma), out.gamma, atol=1e-14)
        assert out.mu.shape == (40, 3) and out.gamma.shape == (40, 3, 7)

    def test_gaussian_head_has_no_coefficients(self):
        p = init_encoder(make_rng(3), J=1, K=0)
        out = forward_encode(p, np.zeros(4))
        assert out.gamma is None and out.log_gamma is None

    def test_tape_and_plain_agree(self):
        p = init_encoder(make_rng(4), J=1, K=4, hidden=5)
        x = np.linspace(-2, 2, 9)
        a = forward_encode(p, x)
        b = forward_encode(p, x, ad.Tape())
        np.testing.assert_array_equal(a.gamma, ad.value(b.gamma))
        np.testing.assert_array_equal(a.sigma, ad.value(b.sigma))
        assert set(b.leaves) == set(p.names)

    @pytest.mark.parametrize("support", [(-np.inf, np.inf), (0.0, np.inf), (0.0, 1.0), (-np.inf, 2.0)])
    @pytest.mark.parametrize("seed", range(3))
    def test_output_gradients_match_differences(self, support, seed):
        p = init_encoder(make_rng(seed, 9), J=2, K=3, hidden=5, x_shift=0.5, x_scale=2.0, support=support)
        x = make_rng(seed, 10).normal(size=4)
        c = make_rng(seed, 11).normal(size=(4, 2 + 2 + 6))

        def scalar(out):
            parts = [out.mu, out.sigma, ad.reshape(out.gamma, (4, 6))]
            return sum(ad.sum_(part * c[:, i0:i0 + ad.value(part).shape[1]])
                       for part, i0 in zip(parts, (0, 2, 4)))

        tape = ad.Tape()
        out = forward_encode(p, x, tape)
        leaves = [out.leaves[k] for k in p.names]
        g = np.concatenate([v.ravel() for v in ad.grad(scalar(out), leaves)])

        def f(flat):
            q = p.copy()
            q.set_flat(flat)
            return float(scalar(forward_encode(q, x)))

        fd = finite_difference(f, p.flat(), 1e-6)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4

    def test_non_finite_output_raises(self):
        p = init_encoder(make_rng(5), J=1, K=3)
        p.weights["b3"][0] = np.nan
        with pytest.raises(TrainingStepError) as e:
            forward_encode(p, np.zeros(2))
        assert e.value.param == "mu"

    def test_standardization_applied(self):
        p = init_encoder(make_rng(6), J=1, K=3, x_shift=10.0, x_scale=5.0)
        q = p.copy()
        q.x_shift, q.x_scale = 0.0, 1.0
        np.testing.assert_allclose(forward_encode(p, np.array([15.0])).mu, forward_encode(q, np.array([1.0])).mu)

    def test_flat_roundtrip(self):
        p = init_encoder(make_rng(7), J=1, K=3)
        q = p.copy()
        q.set_flat(p.flat() * 2)
        np.testing.assert_array_equal(q.flat(), 2 * p.flat())
        assert q.size == p.size == len(p.flat())


class TestLinks:
    def test_positive_link_strictly_positive(self):
        s = np.linspace(-1e6, 1e6, 100_001)
        v = positive_link(s)
        assert np.all(v > 0) and np.all(np.isfinite(v))
        assert v.min() >= SIGMA_FLOOR

    @pytest.mark.parametrize("support", [(0.0, np.inf), (0.0, 1.0), (-np.inf, 2.0)])
    def test_interval_stays_inside_support(self, support):
        rng = make_rng(8)
        a = rng.normal(size=1000) * 20
        b = rng.normal(size=1000) * 20
        mu, sigma = location_scale(a, b, support)
        assert np.all(sigma > 0)
        assert np.all(mu >= support[0]) and np.all(mu + sigma <= support[1] + 1e-12)

    @pytest.mark.parametrize("support", [(-np.inf, np.inf), (0.0, np.inf), (0.0, 1.0), (-np.inf, 2.0)])
    def test_inverse_roundtrip(self, support):
        lo = support[0] if np.isfinite(support[0]) else -3.0
        hi = support[1] if np.isfinite(support[1]) else 5.0
        mu, sigma = lo + 0.2 * (hi - lo), 0.5 * (hi - lo) * 0.9
        a, b = location_scale_inverse(mu, sigma, support)
        m2, s2 = location_scale(np.array(a), np.array(b), support)
        assert float(m2) == pytest.approx(mu, rel=1e-10, abs=1e-12)
        assert float(s2) == pytest.approx(sigma, rel=1e-10)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        params = {"w": np.array([1.0, -2.0])}
        opt = Adam(lr=0.1)
        for _ in range(10):
            adam_step(opt, params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_constant_gradient_moves_against_sign(self):
        params = {"w": np.array([0.0, 0.0])}
        opt = Adam(lr=0.01, decay=0.0)
        for _ in range(50):
            opt.step(params, {"w": np.array([3.0, -0.5])})
        assert params["w"][0] < 0 < params["w"][1]

    def test_quadratic_bowl(self):
        params = {"w": np.array([1.0])}
        opt = Adam(lr=0.05, decay=0.0)
        for _ in range(500):
            opt.step(params, {"w": 2 * params["w"]})
        assert abs(params["w"][0]) < 1e-3

    def test_non_finite_gradient_skips(self):
        params = {"w": np.array([1.0])}
        opt = Adam()
        assert not opt.step(params, {"w": np.array([np.nan])})
        assert opt.skipped == 1 and opt.t == 0 and params["w"][0] == 1.0

    def test_decay_per_epoch(self):
        opt = Adam(lr=0.01, decay=0.05)
        opt.end_epoch()
        opt.end_epoch()
        assert opt.lr == pytest.approx(0.01 * 0.95 ** 2)

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            Adam(lr=0.0)
