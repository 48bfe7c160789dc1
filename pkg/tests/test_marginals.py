"""Target-distribution closed forms and consistency properties."""

import numpy as np
import pytest

from markovflow.black import black_call
from markovflow.errors import InvalidInputError, ProbabilityError
from markovflow.marginals import (
    DoubleExponentialMarginal,
    LognormalMarginal,
    MarginalSet,
    MixedLognormalMarginal,
    MlnParams,
    NormalMarginal,
    TabulatedMarginal,
    check_convex_order,
    marginal_set_from_json,
    marginal_set_to_json,
)


class TestDoubleExponentialClosedForms:
    def test_call_at_zero_strike(self):
        de = DoubleExponentialMarginal(1.0, lam=1.0, lam_dot=-0.5)
        assert de.call(0.0) == pytest.approx(0.5)

    def test_call_negative_strike(self):
        de = DoubleExponentialMarginal(1.0, lam=1.0, lam_dot=-0.5)
        assert de.call(-1.0) == pytest.approx(1.0 + np.exp(-1.0) / 2.0, rel=1e-12)

    def test_call_vanishes_at_large_strike(self):
        de = DoubleExponentialMarginal(1.0, lam=1.0, lam_dot=-0.5)
        assert de.call(80.0) < 1e-30

    def test_cdf_values(self):
        de = DoubleExponentialMarginal(4.0)  # lam = 1/2
        assert de.cdf(0.0) == pytest.approx(0.5)
        assert de.cdf(2.0) == pytest.approx(1.0 - np.exp(-1.0) / 2.0, rel=1e-12)

    def test_quantile_values(self):
        de = DoubleExponentialMarginal(1.0, lam=1.0, lam_dot=-0.5)
        assert de.quantile(0.75) == pytest.approx(-np.log(2.0 * 0.25), rel=1e-12)
        assert de.quantile(0.25) == pytest.approx(np.log(0.5), rel=1e-12)
        with pytest.raises(ProbabilityError):
            de.quantile(-0.1)

    def test_quantile_inverts_cdf(self):
        de = DoubleExponentialMarginal(2.0)
        ys = np.linspace(-9.0, 9.0, 37)
        assert np.allclose(de.quantile(de.cdf(ys)), ys, atol=1e-10)

    def test_local_vol_values(self):
        assert DoubleExponentialMarginal(1.0).local_vol_sq(0.0) == pytest.approx(1.0)
        assert DoubleExponentialMarginal(4.0).local_vol_sq(2.0) == pytest.approx(2.0)
        assert DoubleExponentialMarginal(1.0).local_vol_sq(1.0) == pytest.approx(2.0)

    def test_flow_values(self):
        de = DoubleExponentialMarginal(1.0)
        assert de.flow(2.0) == pytest.approx(3.0)
        assert de.flow(0.0) == 0.0
        assert de.flow(-2.0) == pytest.approx(-3.0)

    def test_flow_derivative_matches_local_vol(self):
        # f'(x) = sigma_loc(f(x)) on |x| <= 5, by central differences
        de = DoubleExponentialMarginal(1.7)
        x = np.linspace(-5.0, 5.0, 2001)
        h = x[1] - x[0]
        fp = (de.flow(x + h) - de.flow(x - h)) / (2.0 * h)
        sig = np.sqrt(de.local_vol_sq(de.flow(x)))
        mask = np.abs(x) > 2 * h  # the sign kink at 0 breaks central differences
        assert np.max(np.abs(fp - sig)[mask]) < 1e-6

    def test_call_decreasing_in_lambda(self):
        lams = np.linspace(0.5, 3.0, 11)
        for strike in (-1.0, 0.0, 1.5):
            calls = [DoubleExponentialMarginal(1.0, lam=l, lam_dot=-0.1).call(strike)
                     for l in lams]
            assert np.all(np.diff(calls) < 0.0)

    def test_invalid_parameters(self):
        with pytest.raises(InvalidInputError):
            DoubleExponentialMarginal(0.0)
        with pytest.raises(InvalidInputError):
            DoubleExponentialMarginal(1.0, lam=-1.0)
        with pytest.raises(InvalidInputError):
            DoubleExponentialMarginal(1.0, lam=1.0, lam_dot=0.5)


def _put_side_integral(m, strike, lo, n=400_001):
    ys = np.linspace(lo, strike, n)
    return np.trapezoid((strike - ys) * np.asarray(m.density(ys)), ys)


class TestPutCallConsistency:
    @pytest.mark.parametrize("marginal,lo", [
        (DoubleExponentialMarginal(1.0), -40.0),
        (NormalMarginal(0.3, 1.5), -12.0),
        (MixedLognormalMarginal(MlnParams(np.array([0.5, 0.5]),
                                          np.array([0.9, 1.1]),
                                          np.array([0.2, 0.4])), 1.0), 1e-9),
    ])
    def test_put_parity(self, marginal, lo):
        strike = marginal.mean + 0.3
        put = marginal.call(strike) - (marginal.mean - strike)
        assert put == pytest.approx(_put_side_integral(marginal, strike, lo), abs=5e-7)


class TestMixedLognormal:
    def test_single_mode_black(self):
        p = MlnParams(np.array([1.0]), np.array([1.0]), np.array([0.2]))
        m = MixedLognormalMarginal(p, 1.0)
        assert m.call(1.0) == pytest.approx(0.0796557, abs=1e-6)

    def test_zero_strike_gives_forward(self):
        p = MlnParams(np.array([0.3, 0.7]), np.array([0.8, 1.2]), np.array([0.2, 0.5]))
        m = MixedLognormalMarginal(p, 2.0)
        assert m.call(0.0) == pytest.approx(p.forward, rel=1e-12)

    def test_degenerate_two_mode_equals_one_mode(self):
        one = MixedLognormalMarginal(
            MlnParams(np.array([1.0]), np.array([1.1]), np.array([0.3])), 1.5)
        two = MixedLognormalMarginal(
            MlnParams(np.array([0.5, 0.5]), np.array([1.1, 1.1]),
                      np.array([0.3, 0.3])), 1.5)
        ks = np.linspace(0.4, 2.5, 21)
        assert np.allclose(one.call(ks), two.call(ks), atol=1e-14)

    def test_quantile_inverts_cdf(self):
        p = MlnParams(np.array([0.6, 0.4]), np.array([0.9, 1.2]), np.array([0.15, 0.6]))
        m = MixedLognormalMarginal(p, 1.0)
        qs = np.array([0.01, 0.2, 0.5, 0.8, 0.99])
        assert np.allclose(m.cdf(m.quantile(qs)), qs, atol=1e-10)

    def test_params_validation(self):
        with pytest.raises(InvalidInputError):
            MlnParams(np.array([0.5, 0.6]), np.array([1.0, 1.0]), np.array([0.2, 0.2]))
        with pytest.raises(InvalidInputError):
            MlnParams(np.array([1.0]), np.array([-1.0]), np.array([0.2]))


class TestTabulatedMarginal:
    def _build(self):
        ref = LognormalMarginal(1.0, 0.3, 1.0)
        ks = np.geomspace(0.4, 2.5, 101)
        return ref, TabulatedMarginal(ks, np.asarray(ref.cdf(ks)), forward=1.0)

    def test_cdf_matches_reference(self):
        ref, tab = self._build()
        ys = np.geomspace(0.5, 2.2, 31)
        assert np.allclose(tab.cdf(ys), ref.cdf(ys), atol=2e-4)

    def test_tail_extrapolation(self):
        ref, tab = self._build()
        # beyond the grid the lognormal tail keeps level and slope sensible
        assert tab.cdf(3.5) == pytest.approx(float(ref.cdf(3.5)), abs=5e-3)
        assert 0.0 < tab.cdf(0.3) < 0.05

    def test_quantile_roundtrip(self):
        _, tab = self._build()
        qs = np.linspace(0.02, 0.98, 25)
        assert np.allclose(tab.cdf(tab.quantile(qs)), qs, atol=1e-6)

    def test_call_matches_reference(self):
        ref, tab = self._build()
        ks = np.array([0.7, 1.0, 1.4, 2.0])
        assert np.allclose(tab.call(ks), ref.call(ks), atol=5e-4)


class TestConvexOrder:
    def test_double_exponential_family_in_order(self):
        ts = [0.1, 1.0, 2.0, 3.0]
        mset = MarginalSet(np.array(ts), [DoubleExponentialMarginal(t) for t in ts], 0.0)
        report = check_convex_order(mset, np.linspace(-8.0, 8.0, 101))
        assert report.ok

    def test_reversed_order_detected(self):
        mset = MarginalSet(
            np.array([1.0, 2.0]),
            [NormalMarginal(0.0, 2.0), NormalMarginal(0.0, 1.0)],
            0.0,
        )
        report = check_convex_order(mset, np.linspace(-3.0, 3.0, 41))
        assert not report.ok
        assert report.max_violation > 1e-3

    def test_identical_marginals_pass(self):
        mset = MarginalSet(
            np.array([1.0, 2.0]),
            [NormalMarginal(0.0, 1.0), NormalMarginal(0.0, 1.0)],
            0.0,
        )
        assert check_convex_order(mset, np.linspace(-3, 3, 21)).ok


class TestSerialization:
    def test_round_trip_all_kinds(self):
        ks = np.geomspace(0.5, 2.0, 21)
        ref = LognormalMarginal(1.0, 0.25, 0.5)
        mset = MarginalSet(
            np.array([0.5, 1.0, 2.0, 3.0]),
            [
                DoubleExponentialMarginal(0.5),
                NormalMarginal(0.1, 1.2),
                MixedLognormalMarginal(
                    MlnParams(np.array([0.4, 0.6]), np.array([0.9, 1.1]),
                              np.array([0.2, 0.35])), 2.0),
                TabulatedMarginal(ks, np.asarray(ref.cdf(ks)), 1.0),
            ],
            spot=1.0,
        )
        back = marginal_set_from_json(marginal_set_to_json(mset))
        assert np.allclose(back.maturities, mset.maturities)
        ys = np.linspace(0.6, 1.8, 9)
        for a, b in zip(mset.marginals, back.marginals):
            assert np.allclose(np.asarray(a.cdf(ys)), np.asarray(b.cdf(ys)), atol=1e-14)

    def test_unknown_kind_rejected(self):
        with pytest.raises(InvalidInputError):
            marginal_set_from_json(
                '{"spot": 0, "maturities": [1.0], '
                '"marginals": [{"kind": "mystery"}]}'
            )
