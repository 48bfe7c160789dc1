"""Time-homogeneous calibration: drift relation, renormalization,
extrapolation, and the fixed points of both period kinds."""

import logging

import numpy as np
import pytest

from markovflow.errors import InvalidInputError, OneSidedMassError
from markovflow.grids import DensitySlice, FlowSlice, build_uniform_grid
from markovflow.homogeneous import (
    ExtrapolationPolicy,
    apply_extrapolation,
    calibrate_first_period,
    calibrate_period,
    convergence_rate,
    drift_from_flow,
    mean_zero_renormalize,
    mean_zero_renormalize_cdf,
)
from markovflow.brownian import brownian_cdf
from markovflow.marginals import (
    DoubleExponentialMarginal,
    LognormalMarginal,
    NormalMarginal,
)

POLICY = ExtrapolationPolicy(y_max=7.0)


class TestDriftFromFlow:
    def test_linear_flow_zero_drift(self):
        g = build_uniform_grid(101, -5.0, 5.0)
        mu = drift_from_flow(FlowSlice(g, 3.0 * g.nodes + 1.0))
        assert np.max(np.abs(mu.values)) < 1e-12

    def test_exponential_flow_constant_drift(self):
        g = build_uniform_grid(501, -5.0, 5.0)
        sigma = 0.3
        mu = drift_from_flow(FlowSlice(g, np.exp(sigma * g.nodes)))
        assert np.max(np.abs(mu.values[5:-5] + sigma / 2.0)) < 1e-5

    def test_quadratic_flow_analytic_drift(self):
        # f = x + x^2/4 on x > 0: mu = -1 / (4 + 2x), by symbolic differentiation
        g = build_uniform_grid(401, 0.5, 8.5)
        f = FlowSlice(g, g.nodes + 0.25 * g.nodes**2)
        mu = drift_from_flow(f)
        expected = -1.0 / (4.0 + 2.0 * g.nodes)
        inner = slice(4, -4)  # boundary cells are guard-zeroed
        assert np.max(np.abs(mu.values[inner] - expected[inner])) < 1e-10

    def test_degenerate_derivative_zeroed(self):
        g = build_uniform_grid(101, -1.0, 1.0)
        mu = drift_from_flow(FlowSlice(g, np.zeros(g.n)))
        assert np.all(mu.values == 0.0)


class TestApplyExtrapolation:
    def test_bounded_flow_unchanged(self):
        g = build_uniform_grid(101, -2.0, 2.0)
        f = FlowSlice(g, g.nodes)
        assert apply_extrapolation(f, POLICY) is f

    def test_de_tails_linearized(self):
        t1 = 0.1
        de = DoubleExponentialMarginal(t1)
        g = build_uniform_grid(500, -2.5, 2.5)
        from markovflow.grids import MonotoneCdf, compose_quantile_cdf

        F = MonotoneCdf(g, NormalMarginal(0.0, t1).cdf(g.nodes))
        f = apply_extrapolation(compose_quantile_cdf(de.quantile, F), POLICY)
        assert f.extrap_lo is not None and f.extrap_hi is not None
        tail = f.values[f.extrap_hi:]
        assert np.allclose(np.diff(tail), np.diff(tail)[0], atol=1e-12)
        mu = drift_from_flow(f, y_max=POLICY.y_max)
        assert np.all(mu.values[f.extrap_hi:] == 0.0)
        assert np.all(mu.values[: f.extrap_lo + 1] == 0.0)

    def test_monotone_preserved(self):
        g = build_uniform_grid(500, -3.0, 3.0)
        vals = 10.0 * np.sinh(g.nodes)
        f = apply_extrapolation(FlowSlice(g, vals), POLICY)
        assert np.all(np.diff(f.values) >= -1e-12)

    def test_degenerate_threshold_warns(self, caplog):
        # even node count: the two crossings share a cell, nothing in between
        g = build_uniform_grid(100, -1.0, 1.0)
        f = FlowSlice(g, 1000.0 * g.nodes)
        with caplog.at_level(logging.WARNING):
            out = apply_extrapolation(f, ExtrapolationPolicy(y_max=0.5))
        assert "central nodes" in caplog.text
        assert np.all(np.diff(out.values) >= 0.0)


class TestMeanZeroRenormalize:
    def test_symmetric_density_unchanged(self):
        g = build_uniform_grid(501, -8.0, 8.0)
        p = DensitySlice(g, np.exp(-0.5 * g.nodes**2))
        out = mean_zero_renormalize(p)
        assert np.max(np.abs(out.values - p.values)) < 1e-12

    def test_shifted_gaussian_recentred(self):
        g = build_uniform_grid(801, -10.0, 10.0)
        p = DensitySlice(g, np.exp(-0.5 * (g.nodes - 0.5) ** 2))
        out = mean_zero_renormalize(p)
        w = g.trapezoid_weights()
        assert abs((w * out.values).sum() - 1.0) < 1e-10
        assert abs((w * out.values * g.nodes).sum()) < 1e-10

    def test_one_sided_mass_raises(self):
        g = build_uniform_grid(101, 1.0, 5.0)
        p = DensitySlice(g, np.exp(-g.nodes))
        with pytest.raises(OneSidedMassError):
            mean_zero_renormalize(p)

    def test_cdf_variant_matches_density_variant(self):
        from markovflow.grids import cdf_from_density

        g = build_uniform_grid(801, -10.0, 10.0)
        p = DensitySlice(g, np.exp(-0.5 * (g.nodes - 0.4) ** 2 / 1.3))
        F = cdf_from_density(p)
        out_cdf = mean_zero_renormalize_cdf(F)
        out_den = cdf_from_density(mean_zero_renormalize(p))
        # conventions differ by how the multiplier jump at 0 is quadratured,
        # an O(h) localized effect
        assert np.max(np.abs(out_cdf.values - out_den.values)) < 5e-3
        x, w = g.nodes, g.trapezoid_weights()
        dens = out_cdf.density().values
        assert abs((w * dens * x).sum()) < 1e-8


class TestCalibrateFirstPeriod:
    def test_gaussian_target_identity(self):
        t1 = 1.0
        # y_max = 4 bounds the quantile-amplified tails; the true drift is
        # zero there anyway, so the cut introduces no bias
        g = build_uniform_grid(500, -7.0, 7.0)
        per = calibrate_first_period(
            NormalMarginal(0.0, t1), t1, g, ExtrapolationPolicy(y_max=4.0),
            n_steps=33, scheme="crank-nicolson",
        )
        assert per.converged and len(per.f_residuals) < 120
        mask = np.abs(g.nodes) <= 2.5
        assert np.max(np.abs(per.flow.values - g.nodes)[mask]) < 1e-2
        assert np.max(np.abs(per.drift.values[mask])) < 5e-3

    def test_lognormal_reproduces_black_scholes(self):
        # without the mean-zero multipliers the fixed point is exact
        s0, sigma, t1 = 1.0, 0.2, 1.0
        g = build_uniform_grid(800, -5.25, 5.25)
        per = calibrate_first_period(
            LognormalMarginal(s0, sigma, t1), t1, g, ExtrapolationPolicy(y_max=50.0),
            n_steps=300, max_iter=800, tol=1e-10, mean_zero=False,
            mollifier_cells=0.5, scheme="crank-nicolson",
        )
        x = g.nodes
        mask = np.abs(x) <= 3.0 * np.sqrt(t1)
        rel = np.abs(per.flow.values / (s0 * np.exp(sigma * x)) - 1.0)[mask].max()
        assert rel < 1e-4
        assert np.abs(per.drift.values + sigma / 2.0)[mask].max() < 2e-4

    def test_de_first_period_rate(self):
        t1 = 0.1
        de = DoubleExponentialMarginal(t1)
        g = build_uniform_grid(500, -2.055, 2.055)
        per = calibrate_first_period(
            de, t1, g, POLICY, n_steps=4, max_iter=100, tol=0.0,
            scheme="crank-nicolson",
        )
        rate = convergence_rate(per.f_residuals, 50, 100)
        assert 0.912 - 0.03 <= rate <= 0.912 + 0.03

    def test_mean_zero_invariant(self):
        t1 = 0.5
        de = DoubleExponentialMarginal(t1)
        g = build_uniform_grid(500, -4.6, 4.6)
        per = calibrate_first_period(de, t1, g, POLICY, n_steps=16,
                                     scheme="crank-nicolson", max_iter=120, tol=0.0)
        w = g.trapezoid_weights()
        dens = per.F_end.density().values
        assert abs((w * dens * g.nodes).sum()) < 1e-10


class TestCalibratePeriod:
    def test_gaussian_pair_identity(self):
        g = build_uniform_grid(500, -7.5, 7.5)
        per = calibrate_period(
            NormalMarginal(0.0, 1.0), NormalMarginal(0.0, 2.0), 1.0, 2.0, g,
            ExtrapolationPolicy(y_max=5.0), n_steps=33, scheme="crank-nicolson",
        )
        assert per.converged
        mask = np.abs(g.nodes) <= 3.0
        assert np.max(np.abs(per.flow.values - g.nodes)[mask]) < 2e-3
        assert np.max(np.abs(per.drift.values[mask])) < 1e-3

    def test_lognormal_pair_black_scholes(self):
        s0, sigma = 1.0, 0.2
        g = build_uniform_grid(800, -7.0, 7.0)
        per = calibrate_period(
            LognormalMarginal(s0, sigma, 1.0), LognormalMarginal(s0, sigma, 2.0),
            1.0, 2.0, g, ExtrapolationPolicy(y_max=50.0), n_steps=300,
            max_iter=400, scheme="crank-nicolson",
        )
        x = g.nodes
        mask = np.abs(x) <= 3.0
        # flow matches the exponential up to the mean-zero gauge factor
        expected = s0 * np.exp(-0.5 * sigma**2 * 1.0) * np.exp(sigma * x)
        assert np.abs(per.flow.values / expected - 1.0)[mask].max() < 5e-4
        assert np.abs(per.drift.values + sigma / 2.0)[mask].max() < 1e-3

    def test_de_period_rate_and_match(self):
        nus = [DoubleExponentialMarginal(1.0), DoubleExponentialMarginal(2.0)]
        g = build_uniform_grid(500, -14.14, 14.14)
        per = calibrate_period(nus[0], nus[1], 1.0, 2.0, g, POLICY,
                               n_steps=34, max_iter=500, tol=0.0,
                               scheme="crank-nicolson")
        rate = convergence_rate(per.f_residuals, 100, 500)
        assert 0.986 - 0.02 <= rate <= 0.986 + 0.02
        qs = np.linspace(0.01, 0.99, 99)
        err = np.abs(per.pushforward_quantile(qs) - nus[1].quantile(qs)).max()
        assert err < 1e-3

    def test_drift_flow_consistency_at_fixed_point(self):
        nus = [DoubleExponentialMarginal(1.0), DoubleExponentialMarginal(2.0)]
        g = build_uniform_grid(500, -14.14, 14.14)
        per = calibrate_period(nus[0], nus[1], 1.0, 2.0, g, POLICY,
                               n_steps=34, max_iter=400, scheme="crank-nicolson")
        f, h = per.flow.values, g.h
        fp = per.flow.derivative()
        fpp = np.zeros_like(f)
        fpp[1:-1] = (f[2:] - 2 * f[1:-1] + f[:-2]) / (h * h)
        active = (fp > 1e-6) & (np.abs(f) < 0.9 * POLICY.y_max)
        active[: per.flow.extrap_lo or 0] = False
        if per.flow.extrap_hi is not None:
            active[per.flow.extrap_hi:] = False
        resid = per.drift.values + 0.5 * fpp / np.maximum(fp, 1e-6)
        assert np.max(np.abs(resid[active])) < 1e-6

    def test_bad_interval(self):
        g = build_uniform_grid(100, -5, 5)
        with pytest.raises(InvalidInputError):
            calibrate_period(NormalMarginal(0, 1), NormalMarginal(0, 2),
                             2.0, 1.0, g, POLICY, n_steps=10)


class TestConvergenceRate:
    def test_exact_geometric_sequence(self):
        res = [0.5 * 0.93**n for n in range(200)]
        assert convergence_rate(res, 20, 150) == pytest.approx(0.93, abs=1e-12)

    def test_window_too_short(self):
        with pytest.raises(InvalidInputError):
            convergence_rate([1.0, 0.5], 1, 2)
