"""Undiscounted Black formula on forward-normalized inputs."""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from .errors import BracketError


def norm_cdf(x):
    return ndtr(x)


def norm_ppf(q):
    return ndtri(q)


def black_call(forward, vol, expiry, strike):
    """Undiscounted call E[(F_T - K)^+] for lognormal F_T, F_0 = forward.

    Vectorized over any argument; degenerate vol/expiry returns intrinsic.
    """
    forward = np.asarray(forward, dtype=np.float64)
    strike = np.asarray(strike, dtype=np.float64)
    total = np.asarray(vol, dtype=np.float64) * np.sqrt(expiry)
    intrinsic = np.maximum(forward - strike, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.log(forward / strike) / total + 0.5 * total
        d2 = d1 - total
        price = forward * ndtr(d1) - strike * ndtr(d2)
    out = np.where(strike <= 0.0, forward - strike, np.where(total <= 0.0, intrinsic, price))
    return out if out.ndim else float(out)


def black_implied_vol(price, forward, expiry, strike, lo=1e-9, hi=10.0) -> float:
    """Implied Black vol by bracketed root-finding."""
    intrinsic = max(forward - strike, 0.0)
    if price < intrinsic - 1e-14 or price >= forward:
        raise BracketError(f"price {price} outside no-arbitrage bounds")
    if price <= intrinsic + 1e-16:
        return 0.0

    def gap(vol):
        return black_call(forward, vol, expiry, strike) - price

    if gap(hi) < 0.0:
        raise BracketError(f"implied vol above bracket hi={hi}")
    return float(brentq(gap, lo, hi, xtol=1e-14, rtol=1e-14))


def lognormal_cdf(y, forward, vol, expiry):
    """CDF of a driftless lognormal with mean ``forward``."""
    y = np.asarray(y, dtype=np.float64)
    total = vol * np.sqrt(expiry)
    out = np.zeros_like(y, dtype=np.float64)
    pos = y > 0.0
    z = (np.log(np.where(pos, y, 1.0) / forward) + 0.5 * total**2) / total
    out[pos] = ndtr(z[pos])
    return out


def lognormal_pdf(y, forward, vol, expiry):
    y = np.asarray(y, dtype=np.float64)
    total = vol * np.sqrt(expiry)
    out = np.zeros_like(y, dtype=np.float64)
    pos = y > 0.0
    yp = np.where(pos, y, 1.0)
    z = (np.log(yp / forward) + 0.5 * total**2) / total
    out[pos] = (np.exp(-0.5 * z[pos] ** 2) / np.sqrt(2.0 * np.pi)) / (yp[pos] * total)
    return out
