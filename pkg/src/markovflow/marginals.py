"""Target-distribution implementations.

A marginal is anything exposing a CDF, a quantile function, undiscounted
call prices, and a mean.  The analytic double-exponential family doubles
as the synthetic test oracle; mixed lognormals come out of the skew
fitter; tabulated marginals wrap empirical CDFs with lognormal tails.
"""

from __future__ import annotations

import abc
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .black import black_call, lognormal_cdf, lognormal_pdf, norm_cdf, norm_ppf
from .errors import BracketError, InvalidInputError, ProbabilityError


def _check_prob(q) -> np.ndarray:
    q_arr = np.asarray(q, dtype=np.float64)
    if np.any(q_arr < 0.0) or np.any(q_arr > 1.0):
        raise ProbabilityError(f"probability outside [0, 1]: {q!r}")
    return q_arr


class Marginal(abc.ABC):
    """One target distribution: CDF, quantile, call price, mean."""

    @property
    @abc.abstractmethod
    def mean(self) -> float: ...

    @abc.abstractmethod
    def cdf(self, y): ...

    @abc.abstractmethod
    def quantile(self, q): ...

    @abc.abstractmethod
    def call(self, strike): ...

    def density(self, y):
        raise NotImplementedError(f"{type(self).__name__} has no density")

    def put(self, strike):
        """Put price by parity with the undiscounted forward."""
        return self.call(strike) - (self.mean - np.asarray(strike, dtype=np.float64))


class NormalMarginal(Marginal):
    """Gaussian target; the fixed point of every scheme is the identity flow."""

    def __init__(self, mu: float, var: float):
        if var <= 0.0:
            raise InvalidInputError(f"variance must be positive, got {var}")
        self.mu = float(mu)
        self.var = float(var)
        self.sd = float(np.sqrt(var))

    @property
    def mean(self) -> float:
        return self.mu

    def cdf(self, y):
        return norm_cdf((np.asarray(y, dtype=np.float64) - self.mu) / self.sd)

    def quantile(self, q):
        return self.mu + self.sd * norm_ppf(_check_prob(q))

    def call(self, strike):
        k = (np.asarray(strike, dtype=np.float64) - self.mu) / self.sd
        # Bachelier: E(Y-K)^+ = sd * (phi(k) - k*(1-Phi(k)))
        phi = np.exp(-0.5 * k * k) / np.sqrt(2.0 * np.pi)
        return self.sd * (phi - k * (1.0 - norm_cdf(k)))

    def density(self, y):
        z = (np.asarray(y, dtype=np.float64) - self.mu) / self.sd
        return np.exp(-0.5 * z * z) / (self.sd * np.sqrt(2.0 * np.pi))


class LognormalMarginal(Marginal):
    """Driftless lognormal with mean ``forward`` and total vol ``vol * sqrt(t)``."""

    def __init__(self, forward: float, vol: float, t: float):
        if forward <= 0.0 or vol <= 0.0 or t <= 0.0:
            raise InvalidInputError("forward, vol and t must be positive")
        self.forward = float(forward)
        self.vol = float(vol)
        self.t = float(t)
        self._total = self.vol * np.sqrt(self.t)

    @property
    def mean(self) -> float:
        return self.forward

    def cdf(self, y):
        return lognormal_cdf(y, self.forward, self.vol, self.t)

    def quantile(self, q):
        z = norm_ppf(_check_prob(q))
        return self.forward * np.exp(self._total * z - 0.5 * self._total**2)

    def call(self, strike):
        return black_call(self.forward, self.vol, self.t, strike)

    def density(self, y):
        return lognormal_pdf(y, self.forward, self.vol, self.t)


class DoubleExponentialMarginal(Marginal):
    """Symmetric double-exponential (Laplace) target with rate lambda(t).

    The default term structure lambda(t) = 1/sqrt(t) has every pricing
    quantity in closed form, including a Bachelier-type local volatility
    sigma^2(t, y) = 1 + |y|/sqrt(t) and the matching flow function
    f(t, x) = sign(x) x^2 / (4 sqrt(t)) + x.
    """

    def __init__(self, t: float, lam: float | None = None, lam_dot: float | None = None):
        if t <= 0.0:
            raise InvalidInputError(f"time must be positive, got {t}")
        self.t = float(t)
        self.lam = float(lam) if lam is not None else 1.0 / np.sqrt(self.t)
        self.lam_dot = (
            float(lam_dot) if lam_dot is not None else -0.5 * self.t ** (-1.5)
        )
        if self.lam <= 0.0:
            raise InvalidInputError(f"lambda must be positive, got {self.lam}")
        if self.lam_dot >= 0.0:
            raise InvalidInputError(f"lambda_dot must be negative, got {self.lam_dot}")

    @property
    def mean(self) -> float:
        return 0.0

    def cdf(self, y):
        y = np.asarray(y, dtype=np.float64)
        out = np.where(
            y >= 0.0,
            1.0 - 0.5 * np.exp(-self.lam * y),
            0.5 * np.exp(self.lam * np.minimum(y, 0.0)),
        )
        return out if out.ndim else float(out)

    def quantile(self, q):
        q_arr = _check_prob(q)
        qc = np.clip(q_arr, 1e-300, 1.0 - 1e-16)
        out = np.where(
            qc >= 0.5,
            -np.log(2.0 * (1.0 - qc)) / self.lam,
            np.log(2.0 * qc) / self.lam,
        )
        return out if out.ndim else float(out)

    def call(self, strike):
        k = np.asarray(strike, dtype=np.float64)
        out = np.maximum(-k, 0.0) + np.exp(-self.lam * np.abs(k)) / (2.0 * self.lam)
        return out if out.ndim else float(out)

    def density(self, y):
        y = np.asarray(y, dtype=np.float64)
        out = 0.5 * self.lam * np.exp(-self.lam * np.abs(y))
        return out if out.ndim else float(out)

    def local_vol_sq(self, y):
        """sigma_loc^2(t, y) = 2 (1 + lam |y|) (-lam_dot) / lam^3."""
        y = np.asarray(y, dtype=np.float64)
        out = 2.0 * (1.0 + self.lam * np.abs(y)) * (-self.lam_dot) / self.lam**3
        return out if out.ndim else float(out)

    def flow(self, x):
        """Flow function solving f' = sigma_loc(f), odd in x, f(0) = 0."""
        x = np.asarray(x, dtype=np.float64)
        c = np.sqrt(-self.lam_dot / (2.0 * self.lam))
        mag = ((1.0 + c * np.abs(x)) ** 2 - 1.0) / self.lam
        out = np.sign(x) * mag
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class MlnParams:
    """Mixed-lognormal parameters: weights, mode forwards, mode vols."""

    weights: np.ndarray
    forwards: np.ndarray
    vols: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        f = np.ascontiguousarray(self.forwards, dtype=np.float64)
        s = np.ascontiguousarray(self.vols, dtype=np.float64)
        if not (w.shape == f.shape == s.shape) or w.ndim != 1 or w.size == 0:
            raise InvalidInputError("weights/forwards/vols must be equal-length 1-d")
        if w.min() < -1e-12 or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"weights must lie on the simplex, got {w}")
        if f.min() <= 0.0 or s.min() <= 0.0:
            raise InvalidInputError("mode forwards and vols must be positive")
        object.__setattr__(self, "weights", np.maximum(w, 0.0))
        object.__setattr__(self, "forwards", f)
        object.__setattr__(self, "vols", s)

    @property
    def n_modes(self) -> int:
        return self.weights.size

    @property
    def forward(self) -> float:
        """Mixture forward (martingale constraint holds by construction)."""
        return float(self.weights @ self.forwards)


class MixedLognormalMarginal(Marginal):
    """Risk-neutral density as a weighted mixture of lognormal modes."""

    def __init__(self, params: MlnParams, t: float):
        if t <= 0.0:
            raise InvalidInputError(f"maturity must be positive, got {t}")
        self.params = params
        self.t = float(t)

    @property
    def mean(self) -> float:
        return self.params.forward

    def cdf(self, y):
        p = self.params
        y = np.asarray(y, dtype=np.float64)
        acc = np.zeros_like(y, dtype=np.float64)
        for w, f, s in zip(p.weights, p.forwards, p.vols):
            acc += w * lognormal_cdf(y, f, s, self.t)
        return acc if acc.ndim else float(acc)

    def density(self, y):
        p = self.params
        y = np.asarray(y, dtype=np.float64)
        acc = np.zeros_like(y, dtype=np.float64)
        for w, f, s in zip(p.weights, p.forwards, p.vols):
            acc += w * lognormal_pdf(y, f, s, self.t)
        return acc if acc.ndim else float(acc)

    def call(self, strike):
        p = self.params
        strike = np.asarray(strike, dtype=np.float64)
        acc = np.zeros_like(strike, dtype=np.float64)
        for w, f, s in zip(p.weights, p.forwards, p.vols):
            acc += w * black_call(f, s, self.t, strike)
        return acc if acc.ndim else float(acc)

    def quantile(self, q):
        """Bisection on the mixture CDF, bracketed by the widest mode."""
        q_arr = np.atleast_1d(_check_prob(q)).astype(np.float64)
        p = self.params
        widest = int(np.argmax(p.vols * np.sqrt(self.t)))
        f_w, s_w = p.forwards[widest], p.vols[widest]
        total = s_w * np.sqrt(self.t)
        out = np.empty_like(q_arr)
        for i, qi in enumerate(q_arr):
            qi = min(max(qi, 1e-15), 1.0 - 1e-15)
            z = norm_ppf(qi)
            lo = f_w * np.exp(total * (z - 12.0) - 0.5 * total**2)
            hi = max(p.forwards.max() * np.exp(total * (z + 12.0)), lo * 2.0)
            flo, fhi = self.cdf(lo) - qi, self.cdf(hi) - qi
            for _ in range(60):
                if flo <= 0.0 <= fhi:
                    break
                if flo > 0.0:
                    lo *= 0.5
                    flo = self.cdf(lo) - qi
                if fhi < 0.0:
                    hi *= 2.0
                    fhi = self.cdf(hi) - qi
            else:
                raise BracketError(f"cannot bracket mixture quantile at q={qi}")
            out[i] = brentq(lambda y: self.cdf(y) - qi, lo, hi, xtol=1e-14, rtol=1e-12)
        return out if np.asarray(q).ndim else float(out[0])


class TabulatedMarginal(Marginal):
    """Empirical CDF on a strike grid with lognormal tail extrapolation.

    The tails match the boundary CDF level and slope (density), so
    quantiles and call prices stay usable beyond the quoted strikes.
    """

    def __init__(self, strikes: np.ndarray, cdf_values: np.ndarray, forward: float):
        k = np.ascontiguousarray(strikes, dtype=np.float64)
        v = np.ascontiguousarray(cdf_values, dtype=np.float64)
        if k.ndim != 1 or k.size < 3 or np.any(np.diff(k) <= 0) or k[0] <= 0.0:
            raise InvalidInputError("strikes must be positive and increasing")
        if v.shape != k.shape or np.any(np.diff(v) < -1e-12):
            raise InvalidInputError("cdf values must be nondecreasing")
        self.strikes = k
        self.cdf_values = np.clip(v, 0.0, 1.0)
        self.forward = float(forward)
        self._left = self._fit_tail(side=0)
        self._right = self._fit_tail(side=-1)

    def _fit_tail(self, side: int) -> tuple[float, float]:
        """(m, s) of a lognormal CDF matching level and slope at a boundary."""
        k, v = self.strikes, self.cdf_values
        if side == 0:
            kb, level = k[0], v[0]
            slope = (v[1] - v[0]) / (k[1] - k[0])
        else:
            kb, level = k[-1], v[-1]
            slope = (v[-1] - v[-2]) / (k[-1] - k[-2])
        level = min(max(level, 1e-12), 1.0 - 1e-12)
        slope = max(slope, 1e-300)
        z = norm_ppf(level)
        phi = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
        s = max(phi / (slope * kb), 1e-8)
        m = np.log(kb) - s * z
        return float(m), float(s)

    @property
    def mean(self) -> float:
        return self.forward

    def cdf(self, y):
        y = np.asarray(y, dtype=np.float64)
        out = np.interp(y, self.strikes, self.cdf_values)
        ml, sl = self._left
        mr, sr = self._right
        below = y < self.strikes[0]
        above = y > self.strikes[-1]
        if np.any(below):
            yb = np.where(y > 0.0, y, np.nan)
            out = np.where(below, np.where(y > 0.0, norm_cdf((np.log(yb) - ml) / sl), 0.0), out)
        if np.any(above):
            out = np.where(above, norm_cdf((np.log(np.where(above, y, 1.0)) - mr) / sr), out)
        return out if out.ndim else float(out)

    def quantile(self, q):
        q_arr = np.atleast_1d(_check_prob(q)).astype(np.float64)
        v, k = self.cdf_values, self.strikes
        out = np.interp(q_arr, v, k)
        ml, sl = self._left
        mr, sr = self._right
        below = q_arr < v[0]
        above = q_arr > v[-1]
        if np.any(below):
            qb = np.clip(q_arr, 1e-15, None)
            out = np.where(below, np.exp(ml + sl * norm_ppf(qb)), out)
        if np.any(above):
            qa = np.clip(q_arr, None, 1.0 - 1e-15)
            out = np.where(above, np.exp(mr + sr * norm_ppf(qa)), out)
        return out if np.asarray(q).ndim else float(out[0])

    def call(self, strike):
        """E(Y-K)^+ = integral of (1 - CDF) above K, lognormal beyond the grid."""
        strikes = np.atleast_1d(np.asarray(strike, dtype=np.float64))
        k, v = self.strikes, self.cdf_values
        mr, sr = self._right
        # closed-form lognormal tail integral above the last strike
        fwd_r = np.exp(mr + 0.5 * sr * sr)
        tail = black_call(fwd_r, sr, 1.0, k[-1]) if v[-1] < 1.0 else 0.0
        surv = 1.0 - v
        # cumulative integral of survival from the right end inward
        seg = 0.5 * (surv[1:] + surv[:-1]) * np.diff(k)
        cum_from_right = np.concatenate((np.cumsum(seg[::-1])[::-1], [0.0]))
        out = np.empty_like(strikes)
        for i, kk in enumerate(strikes):
            if kk >= k[-1]:
                out[i] = black_call(fwd_r, sr, 1.0, kk) if v[-1] < 1.0 else 0.0
            elif kk <= k[0]:
                # put side vanishes below the grid except lognormal left tail
                ml, sl = self._left
                fwd_l = np.exp(ml + 0.5 * sl * sl)
                put_tail = black_call(fwd_l, sl, 1.0, kk) - (fwd_l - kk) if v[0] > 0.0 else 0.0
                out[i] = (self.forward - kk) + put_tail
            else:
                j = np.searchsorted(k, kk)
                s_at = np.interp(kk, k, surv)
                out[i] = cum_from_right[j] + 0.5 * (s_at + surv[j]) * (k[j] - kk) + tail
        out = np.maximum(out, 0.0)
        return out if np.asarray(strike).ndim else float(out[0])


@dataclass
class ConvexOrderReport:
    """Adjacent-pair calendar check: call(T_{i+1}, K) >= call(T_i, K)."""

    violations: list[tuple[int, float, float]] = field(default_factory=list)
    max_violation: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass
class MarginalSet:
    """Ordered maturities with one marginal each, plus the spot anchor."""

    maturities: np.ndarray
    marginals: list[Marginal]
    spot: float

    def __post_init__(self):
        t = np.ascontiguousarray(self.maturities, dtype=np.float64)
        if t.ndim != 1 or t.size == 0 or np.any(np.diff(t) <= 0) or t[0] <= 0.0:
            raise InvalidInputError("maturities must be positive and strictly increasing")
        if len(self.marginals) != t.size:
            raise InvalidInputError("one marginal per maturity required")
        self.maturities = t

    def __len__(self) -> int:
        return len(self.marginals)


def check_convex_order(mset: MarginalSet, strikes: np.ndarray, tol: float = 1e-10) -> ConvexOrderReport:
    """Report every (pair, strike) where calendar monotonicity fails."""
    if len(mset) < 2:
        raise InvalidInputError("need at least two maturities to check convex order")
    report = ConvexOrderReport()
    strikes = np.asarray(strikes, dtype=np.float64)
    prev = np.asarray(mset.marginals[0].call(strikes), dtype=np.float64)
    for i in range(1, len(mset)):
        cur = np.asarray(mset.marginals[i].call(strikes), dtype=np.float64)
        gap = cur - prev
        bad = gap < -tol
        for k, g in zip(strikes[bad], gap[bad]):
            report.violations.append((i, float(k), float(-g)))
        if bad.any():
            report.max_violation = max(report.max_violation, float(-gap[bad].min()))
        prev = cur
    return report


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def _marginal_to_dict(m: Marginal) -> dict:
    if isinstance(m, DoubleExponentialMarginal):
        return {"kind": "double-exponential",
                "params": {"t": m.t, "lam": m.lam, "lam_dot": m.lam_dot}}
    if isinstance(m, NormalMarginal):
        return {"kind": "normal", "params": {"mu": m.mu, "var": m.var}}
    if isinstance(m, LognormalMarginal):
        return {"kind": "lognormal",
                "params": {"forward": m.forward, "vol": m.vol, "t": m.t}}
    if isinstance(m, MixedLognormalMarginal):
        return {"kind": "mixed-lognormal",
                "params": {"t": m.t,
                           "weights": m.params.weights.tolist(),
                           "forwards": m.params.forwards.tolist(),
                           "vols": m.params.vols.tolist()}}
    if isinstance(m, TabulatedMarginal):
        return {"kind": "tabulated",
                "strikes": m.strikes.tolist(),
                "cdf": m.cdf_values.tolist(),
                "forward": m.forward}
    raise InvalidInputError(f"cannot serialize marginal type {type(m).__name__}")


def _marginal_from_dict(d: dict) -> Marginal:
    kind = d["kind"]
    if kind == "double-exponential":
        p = d["params"]
        return DoubleExponentialMarginal(p["t"], p.get("lam"), p.get("lam_dot"))
    if kind == "normal":
        return NormalMarginal(d["params"]["mu"], d["params"]["var"])
    if kind == "lognormal":
        p = d["params"]
        return LognormalMarginal(p["forward"], p["vol"], p["t"])
    if kind == "mixed-lognormal":
        p = d["params"]
        params = MlnParams(np.array(p["weights"]), np.array(p["forwards"]), np.array(p["vols"]))
        return MixedLognormalMarginal(params, p["t"])
    if kind == "tabulated":
        return TabulatedMarginal(np.array(d["strikes"]), np.array(d["cdf"]), d["forward"])
    raise InvalidInputError(f"unknown marginal kind {kind!r}")


def marginal_set_to_json(mset: MarginalSet, meta: dict | None = None) -> str:
    doc = {
        "spot": mset.spot,
        "maturities": mset.maturities.tolist(),
        "marginals": [_marginal_to_dict(m) for m in mset.marginals],
    }
    if meta:
        doc["meta"] = meta
    return json.dumps(doc, indent=2)


def marginal_set_from_json(text: str) -> MarginalSet:
    doc = json.loads(text)
    return MarginalSet(
        maturities=np.array(doc["maturities"], dtype=np.float64),
        marginals=[_marginal_from_dict(d) for d in doc["marginals"]],
        spot=float(doc["spot"]),
    )
