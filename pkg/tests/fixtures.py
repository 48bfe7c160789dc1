"""Shared synthetic fixtures for the skew-fitting and pipeline tests."""

import io

import numpy as np

from markovflow.black import black_call
from markovflow.skewfit import QuoteSlice

MARKET_DAYS = np.array([2, 30, 65, 121, 156, 212])


def market_like_smile(day: float) -> tuple[np.ndarray, np.ndarray]:
    """Equity-index-like smile at one maturity: (strikes, implied vols).

    Steep short-dated skew flattening with maturity; strikes span a
    roughly +-2.2 sigma band around the forward.
    """
    t = day / 365.0
    i = np.searchsorted(MARKET_DAYS, day)
    atm = np.array([0.42, 0.36, 0.33, 0.31, 0.30, 0.29])[min(i, 5)]
    skew = np.array([-0.9, -0.5, -0.38, -0.30, -0.27, -0.24])[min(i, 5)]
    curv = np.array([1.5, 0.6, 0.40, 0.30, 0.25, 0.20])[min(i, 5)]
    width = 2.2 * atm * np.sqrt(t) + 0.04
    strikes = np.geomspace(np.exp(-width), np.exp(width), 15)
    lk = np.log(strikes)
    vols = np.clip(atm + skew * lk + curv * lk**2, 0.05, 1.5)
    return strikes, vols


def market_like_slices() -> list[QuoteSlice]:
    out = []
    for day in MARKET_DAYS:
        strikes, vols = market_like_smile(day)
        t = day / 365.0
        out.append(QuoteSlice(t, strikes, black_call(1.0, vols, t, strikes)))
    return out


def market_like_csv() -> str:
    """The same fixture in the quotes-CSV wire format."""
    buf = io.StringIO()
    buf.write("maturity_days,strike,implied_vol,forward\n")
    for day in MARKET_DAYS:
        strikes, vols = market_like_smile(day)
        for k, v in zip(strikes, vols):
            buf.write(f"{day},{k:.10f},{v:.10f},1.0\n")
    return buf.getvalue()


def lognormal_slices(sigma: float = 0.5, expiries=(0.25, 0.5, 1.0, 2.0),
                     n_strikes: int = 25) -> list[QuoteSlice]:
    strikes = np.geomspace(0.4, 2.5, n_strikes)
    return [QuoteSlice(t, strikes, black_call(1.0, sigma, t, strikes))
            for t in expiries]


def crossing_slices() -> list[QuoteSlice]:
    """Two slices with an injected total-implied-variance crossing."""
    strikes = np.geomspace(0.5, 2.0, 21)

    def vol2(k):
        return 0.28 - 0.13 * np.tanh(np.log(k) / 0.3)

    q1 = QuoteSlice(0.5, strikes, black_call(1.0, 0.25, 0.5, strikes))
    q2 = QuoteSlice(1.0, strikes, black_call(1.0, vol2(strikes), 1.0, strikes))
    # sanity: the fixture really does cross
    w1 = 0.25**2 * 0.5
    w2 = vol2(strikes) ** 2 * 1.0
    assert np.any(w2 < w1)
    return [q1, q2]


def affine_de_slices(scale: float = 0.05, expiries=(0.1, 1.0, 2.0, 3.0),
                     n_strikes: int = 25):
    """Double-exponential marginals embedded at S = 1 + scale * Y.

    Returns (slices, quantile_oracle) where the oracle maps (expiry, q)
    to the affine-mapped closed-form quantile.
    """
    from markovflow.marginals import DoubleExponentialMarginal

    slices = []
    des = {t: DoubleExponentialMarginal(t) for t in expiries}
    for t in expiries:
        de = des[t]
        qs = np.linspace(0.02, 0.98, n_strikes)
        strikes = 1.0 + scale * np.asarray(de.quantile(qs))
        # affine map: C_S(K) = scale * C_Y((K-1)/scale)
        prices = scale * np.asarray(de.call((strikes - 1.0) / scale))
        slices.append(QuoteSlice(t, strikes, prices))

    def quantile_oracle(t, q):
        return 1.0 + scale * np.asarray(des[t].quantile(q))

    return slices, quantile_oracle
