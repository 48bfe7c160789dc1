"""Mixed-lognormal fitting and the one-step implicit projection."""

import numpy as np
import pytest

from markovflow.black import black_call, black_implied_vol
from markovflow.errors import InvalidInputError
from markovflow.marginals import (
    MixedLognormalMarginal,
    MlnParams,
    check_convex_order,
)
from markovflow.skewfit import (
    AhStep,
    CallSlice,
    QuoteSlice,
    ah_one_step,
    ah_theta,
    convexity_defect,
    fit_mln_slice,
    fit_sequence,
    pde_strike_grid,
)

from fixtures import crossing_slices, lognormal_slices

PDE_K = pde_strike_grid(1.0, 400)


def _ln_slice(sigma, t, strikes=PDE_K):
    return CallSlice(strikes, np.asarray(black_call(1.0, sigma, t, strikes)), 1.0)


class TestCallSlice:
    def test_intrinsic_accepted(self):
        CallSlice(PDE_K, np.maximum(1.0 - PDE_K, 0.0), 1.0)

    def test_increasing_calls_rejected(self):
        k = np.array([0.5, 1.0, 1.5])
        with pytest.raises(InvalidInputError):
            CallSlice(k, np.array([0.1, 0.2, 0.3]), 1.0)

    def test_concave_calls_rejected(self):
        k = np.array([0.5, 1.0, 1.5, 2.0])
        with pytest.raises(InvalidInputError):
            CallSlice(k, np.array([0.6, 0.5, 0.45, 0.1]), 1.0)


class TestFitMlnSlice:
    def test_self_consistency_one_mode(self):
        truth = MlnParams(np.array([1.0]), np.array([1.0]), np.array([0.3]))
        prices = np.asarray(MixedLognormalMarginal(truth, 1.0).call(PDE_K[::10]))
        res = fit_mln_slice(PDE_K[::10], prices, 1.0, 1.0, n_modes=1,
                            init=truth, n_restarts=1)
        assert res.objective < 1e-6

    def test_two_mode_recovery(self):
        truth = MlnParams(np.array([0.6, 0.4]), np.array([0.9, 1.15]),
                          np.array([0.2, 0.45]))
        ks = np.geomspace(0.5, 2.0, 31)
        prices = np.asarray(MixedLognormalMarginal(truth, 1.0).call(ks))
        res = fit_mln_slice(ks, prices, 1.0, 1.0, n_modes=2, n_restarts=8)
        assert res.objective < 1e-10

    def test_noisy_slice_rms_below_half_noise(self):
        rng = np.random.default_rng(21)
        truth = MlnParams(np.array([0.45, 0.3, 0.15, 0.1]),
                          np.array([0.95, 1.05, 0.85, 1.2]),
                          np.array([0.25, 0.35, 0.5, 0.2]))
        ks = np.geomspace(0.6, 1.8, 25)
        noise_scale = 2e-4  # bid/ask half-width of a liquid index option
        prices = np.asarray(MixedLognormalMarginal(truth, 0.5).call(ks))
        noisy = prices + rng.uniform(-noise_scale, noise_scale, ks.size)
        res = fit_mln_slice(ks, noisy, 0.5, 1.0, n_modes=4, n_restarts=4)
        rms = np.sqrt(res.objective / ks.size)
        assert rms < 0.5 * noise_scale

    def test_martingale_constraint_built_in(self):
        ks = np.geomspace(0.5, 2.0, 15)
        prices = np.asarray(black_call(1.0, 0.4, 1.0, ks))
        res = fit_mln_slice(ks, prices, 1.0, 1.0, n_modes=3, n_restarts=2)
        assert res.params.forward == pytest.approx(1.0, abs=1e-10)
        assert res.params.weights.sum() == pytest.approx(1.0, abs=1e-12)


class TestAhTheta:
    def test_identical_slices_zero_theta(self):
        a = _ln_slice(0.4, 1.0)
        step = ah_theta(a, a, 0.5)
        assert np.all(step.theta_sq == 0.0)

    def test_lognormal_pair_matches_dupire(self):
        # (dC/dT) / (0.5 d2C/dK2) converges to sigma^2 K^2 as dt -> 0
        sigma, t = 0.4, 1.0
        dt = 0.02
        a = _ln_slice(sigma, t)
        b = _ln_slice(sigma, t + dt)
        from markovflow.black import lognormal_pdf

        curvature = lognormal_pdf(PDE_K, 1.0, sigma, t + dt)
        step = ah_theta(a, b, dt, curvature=curvature, theta_cap=50.0)
        mask = (PDE_K > 0.5) & (PDE_K < 2.0)
        expected = sigma**2 * PDE_K[mask] ** 2
        assert np.max(np.abs(step.theta_sq[mask] / expected - 1.0)) < 0.05

    def test_negative_calendar_floored_and_counted(self):
        a = _ln_slice(0.4, 1.0)
        b = _ln_slice(0.35, 1.0)  # smaller total variance: goes backwards
        step = ah_theta(a, b, 0.5)
        assert step.n_floor_calendar > 0
        assert np.all(step.theta_sq >= 0.0)

    def test_cap_applied(self):
        a = CallSlice(PDE_K, np.maximum(1.0 - PDE_K, 0.0), 1.0)
        b = _ln_slice(0.8, 2.0)
        step = ah_theta(a, b, 1e-4, theta_cap=5.0)
        assert step.theta_sq.max() <= 5.0
        assert step.n_capped > 0


class TestAhOneStep:
    def test_zero_theta_identity(self):
        a = _ln_slice(0.4, 1.0)
        step = AhStep(theta_sq=np.zeros(PDE_K.size), dt=0.5)
        out = ah_one_step(a, step, PDE_K)
        inner = slice(1, -1)
        assert np.allclose(out.calls[inner], a.calls[inner], atol=1e-12)

    def test_intrinsic_smoothing_vs_dense_solve(self):
        intrinsic = CallSlice(PDE_K, np.maximum(1.0 - PDE_K, 0.0), 1.0)
        theta = np.full(PDE_K.size, 0.04)
        dt = 1.0
        step = AhStep(theta_sq=theta, dt=dt)
        out = ah_one_step(intrinsic, step, PDE_K)
        # dense cross-check of the same operator
        n = PDE_K.size
        h_lo = PDE_K[1:-1] - PDE_K[:-2]
        h_hi = PDE_K[2:] - PDE_K[1:-1]
        mat = np.eye(n)
        coef = 0.5 * dt * theta[1:-1]
        for i in range(1, n - 1):
            mat[i, i - 1] = -coef[i - 1] * 2 / (h_lo[i - 1] * (h_lo[i - 1] + h_hi[i - 1]))
            mat[i, i + 1] = -coef[i - 1] * 2 / (h_hi[i - 1] * (h_lo[i - 1] + h_hi[i - 1]))
            mat[i, i] = 1 + coef[i - 1] * 2 / (h_lo[i - 1] * h_hi[i - 1])
        rhs = intrinsic.calls.copy()
        rhs[0] = 1.0 - PDE_K[0]
        rhs[-1] = 0.0
        dense = np.linalg.solve(mat, rhs)
        assert np.max(np.abs(out.calls - np.maximum(dense, 0.0))) < 1e-12
        # dominates intrinsic and stays convex
        assert np.all(out.calls >= intrinsic.calls - 1e-10)
        assert convexity_defect(PDE_K, out.calls) > -1e-10

    def test_time_value_created_at_the_money(self):
        intrinsic = CallSlice(PDE_K, np.maximum(1.0 - PDE_K, 0.0), 1.0)
        step = AhStep(theta_sq=np.full(PDE_K.size, 0.04), dt=1.0)
        out = ah_one_step(intrinsic, step, PDE_K)
        i_atm = int(np.argmin(np.abs(PDE_K - 1.0)))
        assert out.calls[i_atm] > intrinsic.calls[i_atm] + 1e-4


class TestFitSequence:
    def test_arbitrage_free_lognormal_chain(self):
        mset, reports = fit_sequence(lognormal_slices(), n_modes=4, n_restarts=2)
        for r in reports:
            assert r.floors_calendar == 0
            assert r.floors_butterfly == 0
            assert r.theta_capped == 0
            assert r.rms_vs_quotes < 5e-5
        assert check_convex_order(mset, np.geomspace(0.25, 4.0, 60)).ok

    def test_crossing_removed(self):
        mset, reports = fit_sequence(crossing_slices(), n_modes=4, n_restarts=2)
        # the projected chain is calendar-clean by construction
        gap = reports[1].projected.calls - reports[0].projected.calls
        assert gap.min() >= -1e-10
        # total implied variance of the output marginals is nondecreasing
        # within the mixed-lognormal re-fit noise
        mny = np.geomspace(0.5, 2.0, 15)
        w = []
        for m, t in zip(mset.marginals, (0.5, 1.0)):
            calls = np.asarray(m.call(mny))
            w.append([black_implied_vol(c, 1.0, t, k) ** 2 * t
                      for c, k in zip(calls, mny)])
        w = np.asarray(w)
        assert np.all(w[1] >= w[0] - 2e-5)

    def test_de_slices_quantile_match(self):
        from fixtures import affine_de_slices

        slices, oracle = affine_de_slices(scale=0.05)
        mset, _ = fit_sequence(slices, n_modes=4, n_restarts=2)
        qs = np.linspace(0.01, 0.99, 99)
        for t, marginal in zip(mset.maturities, mset.marginals):
            expected = oracle(float(t), qs)
            got = np.asarray(marginal.quantile(qs))
            assert np.max(np.abs(got - expected)) < 2e-3

    def test_bad_expiry_order(self):
        a = lognormal_slices(expiries=(1.0,))[0]
        b = lognormal_slices(expiries=(0.5,))[0]
        with pytest.raises(InvalidInputError):
            fit_sequence([a, b])
