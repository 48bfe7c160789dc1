"""Arbitrage-free skew fitting: mixed-lognormal fits chained through the
Andreasen-Huge one-step implicit projection.

Per maturity: fit an MLN to the quotes, compute the one-step local variance
theta^2 against the previous full skew, solve the implicit forward PDE for
the projected skew, and optimize the MLN parameters so the projection --
not the raw MLN -- matches the quotes.  The projected skew always dominates
the previous one, so the output marginals are free of calendar arbitrage by
construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import kernels
from .black import black_call, black_implied_vol
from .errors import InvalidInputError, SolverInstabilityError
from .marginals import MarginalSet, MixedLognormalMarginal, MlnParams

logger = logging.getLogger(__name__)

DEFAULT_THETA_CAP = 10.0
DEFAULT_PDE_NODES = 400
DEFAULT_PDE_RANGE = (0.2, 5.0)


@dataclass(frozen=True)
class CallSlice:
    """Call prices on a strike grid; monotone and convex within tolerance."""

    strikes: np.ndarray
    calls: np.ndarray
    forward: float

    def __post_init__(self):
        k = np.ascontiguousarray(self.strikes, dtype=np.float64)
        c = np.ascontiguousarray(self.calls, dtype=np.float64)
        if k.ndim != 1 or k.size < 3 or np.any(np.diff(k) <= 0.0):
            raise InvalidInputError("strikes must be a 1-d increasing array")
        if c.shape != k.shape or not np.all(np.isfinite(c)):
            raise InvalidInputError("call values must match strikes and be finite")
        if np.any(np.diff(c) > 1e-10):
            raise InvalidInputError("call prices must be nonincreasing in strike")
        if convexity_defect(k, c, interior=True) < -1e-10:
            raise InvalidInputError("call prices must be convex in strike")
        object.__setattr__(self, "strikes", k)
        object.__setattr__(self, "calls", c)


def convexity_defect(k: np.ndarray, c: np.ndarray, interior: bool = False) -> float:
    """Worst butterfly: the most negative slope increment (>= 0 when convex).

    ``interior`` skips the first and last increments, where the Dirichlet
    boundary values of the one-step solve pin the curve.
    """
    slopes = np.diff(c) / np.diff(k)
    if slopes.size < 2:
        return 0.0
    inc = np.diff(slopes)
    if interior and inc.size > 2:
        inc = inc[1:-1]
    return float(inc.min())


def _nonuniform_curvature(k: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Second derivative d2C/dK2 by three-point stencils, edges copied."""
    h_lo = k[1:-1] - k[:-2]
    h_hi = k[2:] - k[1:-1]
    inner = 2.0 * (
        c[:-2] / (h_lo * (h_lo + h_hi))
        - c[1:-1] / (h_lo * h_hi)
        + c[2:] / (h_hi * (h_lo + h_hi))
    )
    out = np.empty_like(c)
    out[1:-1] = inner
    out[0] = inner[0]
    out[-1] = inner[-1]
    return out


@dataclass
class AhStep:
    """One-step implicit local variance theta^2 on the PDE strike grid."""

    theta_sq: np.ndarray
    dt: float
    n_floor_calendar: int = 0
    n_floor_butterfly: int = 0
    n_capped: int = 0


@dataclass
class SliceFitReport:
    maturity: float
    rms_vs_quotes: float
    objective: float
    optimizer_converged: bool
    floors_calendar: int = 0
    floors_butterfly: int = 0
    theta_capped: int = 0
    params_projection: MlnParams | None = None
    params_final: MlnParams | None = None
    projected: CallSlice | None = None


@dataclass
class MlnFitResult:
    params: MlnParams
    objective: float
    converged: bool


def pde_strike_grid(
    forward: float,
    n_nodes: int = DEFAULT_PDE_NODES,
    rel_range: tuple[float, float] = DEFAULT_PDE_RANGE,
) -> np.ndarray:
    """Log-uniform strike grid for the one-step solves."""
    return forward * np.geomspace(rel_range[0], rel_range[1], n_nodes)


def _mln_from_vector(vec: np.ndarray, n_modes: int, forward: float) -> MlnParams:
    """Unconstrained vector -> simplex weights, martingale forwards, vols."""
    logits = np.concatenate(([0.0], vec[: n_modes - 1]))
    w = np.exp(logits - logits.max())
    w /= w.sum()
    d = vec[n_modes - 1: 2 * n_modes - 1]
    d = np.clip(d, -6.0, 6.0)
    f = forward * np.exp(d) / (w @ np.exp(d))
    s = np.exp(np.clip(vec[2 * n_modes - 1:], np.log(5e-3), np.log(3.0)))
    return MlnParams(w, f, s)


def _vector_from_mln(p: MlnParams) -> np.ndarray:
    w = np.maximum(p.weights, 1e-12)
    logits = np.log(w / w[0])[1:]
    d = np.log(p.forwards / p.forward)
    return np.concatenate((logits, d, np.log(p.vols)))


def _atm_vol_guess(strikes, prices, expiry, forward) -> float:
    i = int(np.argmin(np.abs(strikes - forward)))
    try:
        return max(black_implied_vol(prices[i], forward, expiry, strikes[i]), 0.02)
    except Exception:
        return 0.2


def default_mln_init(
    strikes, prices, expiry, forward, n_modes: int
) -> MlnParams:
    """Single-mode guess at the near-ATM implied vol, vols split geometrically."""
    s_atm = _atm_vol_guess(strikes, prices, expiry, forward)
    js = np.arange(n_modes) - 0.5 * (n_modes - 1)
    vols = np.clip(s_atm * 1.25**js, 6e-3, 2.9)
    w = np.full(n_modes, 1.0 / n_modes)
    f = np.full(n_modes, forward)
    return MlnParams(w, f, vols)


def _multistart_minimize(objective, x0: np.ndarray, n_restarts: int, seed: int):
    """Nelder-Mead with deterministic perturbed restarts; keeps the best.

    Each search gets one polish pass (a fresh simplex around the optimum
    digs Nelder-Mead out of its collapsed end state).
    """
    rng = np.random.Generator(np.random.Philox(seed))
    best = None
    starts = [x0]
    for j in range(max(n_restarts - 1, 0)):
        scale = 0.25 if j % 2 == 0 else 0.7
        starts.append(x0 + rng.normal(scale=scale, size=x0.size))
    for s in starts:
        res = minimize(objective, s, method="Powell",
                       options={"maxiter": 25, "xtol": 1e-8, "ftol": 1e-12})
        polish = minimize(objective, res.x, method="Nelder-Mead",
                          options={"maxiter": 1200, "xatol": 1e-12, "fatol": 1e-16})
        if polish.fun < res.fun:
            res = polish
        if best is None or res.fun < best.fun:
            best = res
        if best.fun < 1e-14:
            break
    return best


def fit_mln_slice(
    strikes: np.ndarray,
    prices: np.ndarray,
    expiry: float,
    forward: float,
    n_modes: int = 4,
    init: MlnParams | None = None,
    n_restarts: int = 8,
    seed: int = 0,
    floor_prices: np.ndarray | None = None,
    floor_weight: float = 400.0,
) -> MlnFitResult:
    """Least-squares MLN fit to call quotes at one maturity.

    Weights live on the simplex via softmax and the forward constraint is
    eliminated analytically, so every iterate is a valid martingale
    density.  The optimizer never raises: a failed search returns the best
    point found, flagged through ``converged``.
    """
    strikes = np.asarray(strikes, dtype=np.float64)
    prices = np.asarray(prices, dtype=np.float64)
    if strikes.size != prices.size or strikes.size == 0:
        raise InvalidInputError("strikes and prices must be equal-length")
    if init is None:
        init = default_mln_init(strikes, prices, expiry, forward, n_modes)
    x0 = _vector_from_mln(init)

    def objective(vec):
        try:
            p = _mln_from_vector(vec, n_modes, forward)
        except InvalidInputError:
            return 1e6
        model = MixedLognormalMarginal(p, expiry).call(strikes)
        loss = float(np.sum((model - prices) ** 2))
        if floor_prices is not None:
            # one-sided: dipping below the previous marginal is calendar
            # arbitrage, so it costs more than symmetric misfit
            dip = np.maximum(floor_prices - model, 0.0)
            loss += floor_weight * float(np.sum(dip**2))
        return loss

    best = _multistart_minimize(objective, x0, n_restarts, seed)
    params = _mln_from_vector(best.x, n_modes, forward)
    converged = bool(best.success) or best.fun < 1e-9 * strikes.size
    if not converged:
        logger.warning("MLN fit did not converge (objective %.3e)", best.fun)
    return MlnFitResult(params=params, objective=float(best.fun),
                        converged=converged)


def ah_theta(
    c_prev: CallSlice,
    c_mln_next: CallSlice,
    dt: float,
    curvature: np.ndarray | None = None,
    theta_cap: float = DEFAULT_THETA_CAP,
) -> AhStep:
    """One-step local variance (calendar increment over half the butterfly).

    The numerator is floored at zero (calendar), the denominator at 1e-12
    (butterfly), and theta^2 is capped; the floors are counted so clean
    inputs can assert that none fired.
    """
    if dt <= 0.0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    if not np.array_equal(c_prev.strikes, c_mln_next.strikes):
        raise InvalidInputError("slices must share the strike grid")
    num = (c_mln_next.calls - c_prev.calls) / dt
    n_cal = int(np.sum(num < -1e-14))
    num = np.maximum(num, 0.0)
    if curvature is None:
        curvature = _nonuniform_curvature(c_mln_next.strikes, c_mln_next.calls)
    den = 0.5 * np.asarray(curvature, dtype=np.float64)
    n_bfly = int(np.sum(den < 1e-12))
    den = np.maximum(den, 1e-12)
    theta = num / den
    n_cap = int(np.sum(theta > theta_cap))
    theta = np.minimum(theta, theta_cap)
    return AhStep(theta_sq=theta, dt=dt, n_floor_calendar=n_cal,
                  n_floor_butterfly=n_bfly, n_capped=n_cap)


def ah_one_step(c_prev: CallSlice, step: AhStep, strikes: np.ndarray) -> CallSlice:
    """Solve [1 - dt/2 theta^2 d^2/dK^2] C = C_prev with intrinsic boundaries.

    The operator is an M-matrix for theta^2 >= 0, so the solution dominates
    C_prev and stays convex.
    """
    k = np.asarray(strikes, dtype=np.float64)
    if not np.array_equal(k, c_prev.strikes):
        raise InvalidInputError("strike grid mismatch")
    n = k.size
    h_lo = k[1:-1] - k[:-2]
    h_hi = k[2:] - k[1:-1]
    coef = 0.5 * step.dt * step.theta_sq[1:-1]
    lower = np.zeros(n - 1)
    upper = np.zeros(n - 1)
    diag = np.ones(n)
    lower[:-1] = -coef * 2.0 / (h_lo * (h_lo + h_hi))
    upper[1:] = -coef * 2.0 / (h_hi * (h_lo + h_hi))
    diag[1:-1] = 1.0 + coef * 2.0 / (h_lo * h_hi)
    rhs = c_prev.calls.copy()
    rhs[0] = max(c_prev.forward - k[0], 0.0)
    rhs[-1] = 0.0
    out = kernels.thomas_solve(lower, diag, upper, rhs)
    if not np.all(np.isfinite(out)):
        raise SolverInstabilityError("one-step implicit solve produced non-finite values")
    return CallSlice(strikes=k, calls=np.maximum(out, 0.0), forward=c_prev.forward)


@dataclass
class QuoteSlice:
    """Raw call quotes at one maturity (forward-normalized units)."""

    expiry: float
    strikes: np.ndarray
    prices: np.ndarray


def fit_sequence(
    slices: list[QuoteSlice],
    forward: float = 1.0,
    n_modes: int = 4,
    n_pde_nodes: int = DEFAULT_PDE_NODES,
    pde_range: tuple[float, float] = DEFAULT_PDE_RANGE,
    n_restarts: int = 8,
    seed: int = 0,
    theta_cap: float = DEFAULT_THETA_CAP,
) -> tuple[MarginalSet, list[SliceFitReport]]:
    """Sequential arbitrage-free fit of a whole quote surface.

    Maturity by maturity: the MLN parameters are optimized so that the
    one-step projection of the previous skew matches the quotes, the
    projected skew becomes the next full skew, and the output marginal is
    the MLN re-fit (warm-started) of that projection on the PDE grid.
    """
    if not slices:
        raise InvalidInputError("need at least one quote slice")
    expiries = [s.expiry for s in slices]
    if any(t1 <= t0 for t0, t1 in zip(expiries, expiries[1:])) or expiries[0] <= 0.0:
        raise InvalidInputError("quote slices must have increasing positive expiries")

    k_pde = pde_strike_grid(forward, n_pde_nodes, pde_range)
    c_cur = CallSlice(k_pde, np.maximum(forward - k_pde, 0.0), forward)
    t_prev = 0.0
    prev_refit_calls = None
    marginals = []
    reports = []

    for sl in slices:
        dt = sl.expiry - t_prev
        warm = fit_mln_slice(
            sl.strikes, sl.prices, sl.expiry, forward,
            n_modes=n_modes, n_restarts=n_restarts, seed=seed,
        )

        floors = {"cal": 0, "bfly": 0, "cap": 0}

        def project(params: MlnParams) -> tuple[CallSlice, AhStep]:
            mln = MixedLognormalMarginal(params, sl.expiry)
            c_mln = CallSlice(k_pde, np.maximum.accumulate(
                np.asarray(mln.call(k_pde))[::-1])[::-1], forward)
            step = ah_theta(c_cur, c_mln, dt,
                            curvature=np.asarray(mln.density(k_pde)),
                            theta_cap=theta_cap)
            return ah_one_step(c_cur, step, k_pde), step

        def objective(vec):
            try:
                params = _mln_from_vector(vec, n_modes, forward)
                projected, _ = project(params)
            except (InvalidInputError, SolverInstabilityError):
                return 1e6
            model = np.interp(sl.strikes, k_pde, projected.calls)
            return float(np.sum((model - sl.prices) ** 2))

        best = _multistart_minimize(
            objective, _vector_from_mln(warm.params), n_restarts, seed
        )
        params_proj = _mln_from_vector(best.x, n_modes, forward)
        projected, step = project(params_proj)
        floors["cal"], floors["bfly"], floors["cap"] = (
            step.n_floor_calendar, step.n_floor_butterfly, step.n_capped,
        )

        # fit where the skew carries information: dead wings would swamp
        # the objective on a wide PDE grid
        intrinsic = np.maximum(forward - k_pde, 0.0)
        act = projected.calls - intrinsic > 1e-12 * forward
        act |= np.roll(act, 1) | np.roll(act, -1)
        refit = fit_mln_slice(
            k_pde[act], projected.calls[act], sl.expiry, forward,
            n_modes=n_modes, init=params_proj, n_restarts=n_restarts, seed=seed,
            floor_prices=None if prev_refit_calls is None else prev_refit_calls[act],
        )
        final_marginal = MixedLognormalMarginal(refit.params, sl.expiry)
        marginals.append(final_marginal)
        prev_refit_calls = np.asarray(final_marginal.call(k_pde), dtype=np.float64)
        model_at_quotes = np.interp(sl.strikes, k_pde, projected.calls)
        reports.append(SliceFitReport(
            maturity=sl.expiry,
            rms_vs_quotes=float(np.sqrt(np.mean((model_at_quotes - sl.prices) ** 2))),
            objective=float(best.fun),
            optimizer_converged=(bool(best.success)
                                 or best.fun < 1e-9 * sl.strikes.size)
                                and refit.converged,
            floors_calendar=floors["cal"],
            floors_butterfly=floors["bfly"],
            theta_capped=floors["cap"],
            params_projection=params_proj,
            params_final=refit.params,
            projected=projected,
        ))
        c_cur = projected
        t_prev = sl.expiry

    mset = MarginalSet(np.array(expiries), marginals, spot=forward)
    return mset, reports
