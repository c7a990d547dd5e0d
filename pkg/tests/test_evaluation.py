"""RISE and KL metrics, simplex projection and run reports."""
import math

import numpy as np
import pytest
from scipy import stats

from sadvi.evaluation import (
    MISSING,
    RESULTS_COLUMNS,
    EvalGrid,
    EvalReport,
    eval_grid_for,
    kl_estimate,
    project_to_simplex,
    projection_rate_study,
    rise,
    run_report,
    simplex_l2_projection,
)
from sadvi.splines import equispaced_space, eval_basis


def box(lo, hi):
    return lambda z: np.where((z >= lo) & (z <= hi), 1.0 / (hi - lo), 0.0)


def report(rise_value, case=1, method="sadvi", seed=0, kl=0.0):
    return EvalReport(case, method, 1.0, seed, 6, 3, 10, 0.0, rise_value, kl)


class TestRise:
    def test_disjoint_boxes_gauss(self):
        g = EvalGrid(0.0, 3.0, 512, "gauss", breaks=(1.0, 2.0))
        assert rise(box(0, 1), box(2, 3), g) == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_disjoint_boxes_trapezoid(self):
        # jumps cost O(h) on the trapezoid rule
        assert rise(box(0, 1), box(2, 3), EvalGrid(0.0, 3.0)) == pytest.approx(math.sqrt(2), abs=1e-3)

    @pytest.mark.parametrize("mu,s", [(0.0, 1.0), (1.0, 1.0), (0.5, 2.0), (-2.0, 0.3)])
    def test_gaussian_closed_form(self, mu, s):
        q, p = stats.norm(0, 1).pdf, stats.norm(mu, s).pdf
        ise = (1 / (2 * math.sqrt(math.pi)) + 1 / (2 * math.sqrt(math.pi) * s)
               - 2 * stats.norm.pdf(0.0, mu, math.sqrt(1 + s * s)))
        g = EvalGrid(-14.0, 14.0, 8192)
        assert rise(q, p, g) == pytest.approx(math.sqrt(max(ise, 0.0)), abs=1e-9)

    def test_symmetric_and_zero_on_self(self):
        q, p = stats.beta(2, 5).pdf, stats.beta(3, 3).pdf
        g = EvalGrid(0.0, 1.0)
        assert rise(q, p, g) == rise(p, q, g)
        assert rise(q, q, g) == 0.0

    def test_grid_refinement_stable(self):
        q, p = stats.gamma(3, scale=1 / 3).pdf, stats.gamma(2.5, scale=0.4).pdf
        g = EvalGrid(0.0, 8.0)
        assert abs(rise(q, p, g) - rise(q, p, g.refined())) < 1e-6


class TestKL:
    def test_unit_shift(self):
        g = EvalGrid(-15.0, 15.0, 8192)
        assert kl_estimate(stats.norm(0, 1).pdf, stats.norm(1, 1).pdf, g) == pytest.approx(0.5, abs=1e-9)

    def test_self_is_zero(self):
        f = stats.beta(7, 3).pdf
        assert kl_estimate(f, f, EvalGrid(0.0, 1.0)) == 0.0

    def test_zero_q_contributes_nothing(self):
        g = EvalGrid(0.0, 2.0, 2048, "gauss", breaks=(1.0,))
        assert kl_estimate(box(0, 1), box(0, 2), g) == pytest.approx(math.log(2), abs=1e-12)

    def test_floor_keeps_value_finite(self):
        v = kl_estimate(box(0, 2), box(0, 1), EvalGrid(0.0, 2.0, 2048, "gauss", breaks=(1.0,)))
        assert np.isfinite(v) and v > 100


class TestGrid:
    def test_rejects(self):
        with pytest.raises(ValueError):
            EvalGrid(1.0, 0.0)
        with pytest.raises(ValueError):
            EvalGrid(0.0, 1.0, 10)
        with pytest.raises(ValueError):
            EvalGrid(0.0, 1.0, rule="simpson")

    @pytest.mark.parametrize("rule", ["trapezoid", "gauss"])
    def test_weights_sum_to_length(self, rule):
        _, w = EvalGrid(-1.0, 2.5, 1024, rule, breaks=(0.3,)).nodes_weights()
        assert w.sum() == pytest.approx(3.5, rel=1e-14)

    def test_widened_to_cover_fit(self):
        g = eval_grid_for((0.1, 0.9), (-0.5, 0.7))
        assert (g.lo, g.hi) == (-0.5, 0.9)
        g = eval_grid_for((0.1, 0.9), (0.0, np.inf))
        assert (g.lo, g.hi) == (0.0, 0.9)


class TestProjection:
    def test_simplex_projection(self):
        np.testing.assert_allclose(project_to_simplex(np.array([0.2, 0.3, 0.5])), [0.2, 0.3, 0.5])
        np.testing.assert_allclose(project_to_simplex(np.array([2.0, 0.0])), [1.0, 0.0])
        v = project_to_simplex(np.random.default_rng(0).normal(size=9))
        assert v.min() >= 0 and v.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize("H", [2, 4, 8])
    def test_uniform_target_exact(self, H):
        cell = simplex_l2_projection(lambda z: np.ones_like(z), equispaced_space(3, H))
        assert cell.converged and cell.error < 1e-9

    def test_optimum_matches_brute_force(self):
        sp = equispaced_space(2, 2)
        p = stats.beta(2, 4).pdf
        cell = simplex_l2_projection(p, sp)
        q = sp.quadrature
        B = eval_basis(sp, q.nodes)

        def err(g):
            r = B @ g - p(q.nodes)
            return math.sqrt(np.dot(q.weights, r * r))

        rng = np.random.default_rng(1)
        others = [err(project_to_simplex(cell.gamma + 0.05 * rng.normal(size=sp.K))) for _ in range(200)]
        assert cell.error <= min(others) + 1e-12
        assert cell.error == pytest.approx(err(cell.gamma), rel=1e-12)

    def test_beta_rate_decreasing(self):
        cells = projection_rate_study(stats.beta(7, 3).pdf, (3,), (2, 4, 8, 16))
        errors = [c.error for c in cells]
        assert all(c.converged for c in cells)
        assert all(a > b for a, b in zip(errors, errors[1:]))

    def test_coefficients_on_simplex(self):
        cell = simplex_l2_projection(stats.beta(0.5, 0.5).pdf, equispaced_space(3, 4))
        assert cell.gamma.min() >= 0 and cell.gamma.sum() == pytest.approx(1.0, abs=1e-12)


class TestReports:
    def test_equal_values_zero_sd(self):
        rec = run_report([report(0.1, seed=0), report(0.1, seed=1)])[0]
        assert rec["rise_mean"] == pytest.approx(0.1) and rec["rise_sd"] == 0.0

    def test_sample_sd(self):
        rec = run_report([report(0.0, seed=0), report(0.2, seed=1)])[0]
        assert rec["rise_mean"] == pytest.approx(0.1)
        assert rec["rise_sd"] == pytest.approx(math.sqrt(0.02), rel=1e-12)

    def test_single_replicate_na_sd(self):
        rec = run_report([report(0.3)])[0]
        assert rec["rise_sd"] == MISSING and rec["n"] == 1

    def test_all_nan_cell_na(self):
        rec = run_report([report(np.nan, kl=np.nan), report(np.nan, seed=1, kl=np.nan)])[0]
        assert rec["rise_mean"] == MISSING and rec["kl_sd"] == MISSING

    def test_nan_dropped_from_stats(self):
        rec = run_report([report(0.2), report(np.nan, seed=1), report(0.4, seed=2)])[0]
        assert rec["n"] == 3 and rec["rise_mean"] == pytest.approx(0.3)

    def test_cells_grouped_and_sorted(self):
        rows = [report(0.1, 2, "baseline"), report(0.2, 1, "sadvi"), report(0.3, 1, "baseline")]
        keys = [(r["case"], r["method"]) for r in run_report(rows)]
        assert keys == [(1, "baseline"), (1, "sadvi"), (2, "baseline")]

    def test_row_blank_runtime(self):
        r = report(0.25)
        r.runtime_s = 1.23456
        row = r.row()
        assert len(row) == len(RESULTS_COLUMNS)
        assert row[-1] == "" and row[RESULTS_COLUMNS.index("rise")] == "0.25"
        assert r.row(timing=True)[-1] == "1.235"
