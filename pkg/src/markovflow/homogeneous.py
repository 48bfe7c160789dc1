"""Step-wise time-homogeneous calibration.

Each forward period gets one autonomous flow f(x) and drift
mu(x) = -f''(x) / (2 f'(x)), solved jointly with the law of the
period-start flow variable by fixed-point iteration:

  first period:  propagate a near-delta density, quantile-match, update mu;
  later periods: update the start CDF through the forward propagator and
                 both neighboring marginals, quantile-match, update mu.

Iterations run until both (all three) residuals drop below tolerance or
the iteration budget is exhausted; in the latter case the period is
returned with converged=False and the full residual history, which is what
convergence-rate reporting consumes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .brownian import brownian_cdf
from .errors import ConvergenceError, ConvexOrderError, InvalidInputError, OneSidedMassError
from .fokker_planck import (
    DEFAULT_MU_MAX,
    DriftFn,
    PropagatorSpec,
    near_delta,
    propagate_cdf,
    propagate_density,
)
from .grids import (
    CDF_CLIP,
    DensitySlice,
    FlowSlice,
    Grid,
    MonotoneCdf,
    cdf_from_density,
    compose_quantile_cdf,
    refined_quantile,
)
from .marginals import Marginal

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 500
DERIV_EPS = 1e-10
EDGE_GUARD = 4


@dataclass(frozen=True)
class ExtrapolationPolicy:
    """Replace flow tails beyond |f| > y_max by tangent lines.

    Quantile matching is unreliable where the target density vanishes; the
    linear tails also force zero drift there through f'' = 0.
    """

    y_max: float = 7.0
    mode: str = "linear"

    def __post_init__(self):
        if self.y_max <= 0.0:
            raise InvalidInputError(f"y_max must be positive, got {self.y_max}")
        if self.mode != "linear":
            raise InvalidInputError(f"unsupported extrapolation mode {self.mode!r}")


def apply_extrapolation(f: FlowSlice, policy: ExtrapolationPolicy) -> FlowSlice:
    """Tangent-line tails beyond the y_max crossings.

    The tangent is anchored at the interpolated crossing point with the
    interpolated local slope, so the replaced tails vary continuously with
    the input values; node-anchored tangents make the fixed-point iterations
    rattle at the joint.
    """
    v = f.values.copy()
    x = f.grid.nodes
    n = v.size
    below = np.nonzero(v < -policy.y_max)[0]
    above = np.nonzero(v > policy.y_max)[0]
    lo = int(below[-1]) if below.size else None
    hi = int(above[0]) if above.size else None

    if lo is not None and hi is not None and hi <= lo + 1:
        c0, c1 = n // 2 - 1, n // 2
        logger.warning(
            "extrapolation threshold y_max=%g below the flow scale; "
            "linearizing through the two central nodes", policy.y_max
        )
        slope = (v[c1] - v[c0]) / f.grid.h
        line = v[c0] + slope * (x - x[c0])
        return FlowSlice(f.grid, line, extrap_lo=c0, extrap_hi=c1)

    deriv = np.gradient(v, f.grid.h)
    if lo is not None and lo + 1 < n:
        x_c = np.interp(-policy.y_max, v[lo: lo + 2], x[lo: lo + 2])
        slope = max(float(np.interp(x_c, x, deriv)), 0.0)
        v[: lo + 1] = -policy.y_max + slope * (x[: lo + 1] - x_c)
    if hi is not None and hi >= 1:
        x_c = np.interp(policy.y_max, v[hi - 1: hi + 1], x[hi - 1: hi + 1])
        slope = max(float(np.interp(x_c, x, deriv)), 0.0)
        v[hi:] = policy.y_max + slope * (x[hi:] - x_c)
    if lo is None and hi is None:
        return f
    return FlowSlice(f.grid, v, extrap_lo=lo, extrap_hi=hi)


def drift_from_flow(
    f: FlowSlice,
    mu_max: float = DEFAULT_MU_MAX,
    eps: float = DERIV_EPS,
    y_max: float | None = None,
    ramp_frac: float = 0.05,
    eps_rel: float = 1e-7,
    cdf_values: np.ndarray | None = None,
    cdf_cut: float = 1e-9,
) -> DriftFn:
    """mu = -f'' / (2 f') with central differences; zero where degenerate.

    Zero drift applies in the linear-extrapolation tails and wherever f'
    falls below eps or eps_rel * max(f'): slopes that many orders below
    the bulk mean the flow variable carries no density there, and the
    drift ratio is pure noise.  When the flow-variable CDF is supplied,
    drift is also zeroed where it sits within cdf_cut of {0, 1}: the
    reflected zero-flux boundary mass contaminates the quantile
    composition exactly there.  When y_max is given the drift fades to
    zero over the last ramp_frac * y_max of flow range before the
    threshold, so the cutoff moves continuously with f instead of
    snapping between nodes.
    """
    v, h = f.values, f.grid.h
    fp = f.derivative()
    fpp = np.zeros_like(v)
    fpp[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (h * h)
    mu = np.zeros_like(v)
    active = fp > max(eps, eps_rel * float(fp.max()))
    np.divide(-0.5 * fpp, fp, out=mu, where=active)
    mu[~active] = 0.0
    # boundary cells carry reflected zero-flux mass in a near-vacuum; the
    # drift ratio there is an artifact
    mu[:EDGE_GUARD] = 0.0
    mu[-EDGE_GUARD:] = 0.0
    if f.extrap_lo is not None:
        mu[: f.extrap_lo + 1] = 0.0
    if f.extrap_hi is not None:
        mu[f.extrap_hi:] = 0.0
    if cdf_values is not None:
        # fade over three decades below cdf_cut: a hard cut flips nodes
        # discretely between iterations and rattles the fixed point
        near = np.minimum(cdf_values, 1.0 - cdf_values)
        fade = np.clip((np.log10(np.maximum(near, 1e-300))
                        - np.log10(cdf_cut) + 3.0) / 3.0, 0.0, 1.0)
        mu *= fade
    if y_max is not None:
        band = ramp_frac * y_max
        mu *= np.clip((y_max - np.abs(v)) / band, 0.0, 1.0)
    return DriftFn(f.grid, mu, mu_max=mu_max)


def mean_zero_renormalize(p: DensitySlice) -> DensitySlice:
    """Two-multiplier renormalization enforcing unit mass and zero mean.

    Density values at x > 0 are scaled by C+, at x < 0 by C-, and any
    exact zero node by (C+ + C-)/2; the multipliers solve the 2x2 linear
    system of the mass and first-moment constraints.
    """
    x = p.grid.nodes
    w = p.grid.trapezoid_weights() * p.values
    pos, neg, zero = x > 0.0, x < 0.0, x == 0.0
    s_pos = w[pos].sum() + 0.5 * w[zero].sum()
    s_neg = w[neg].sum() + 0.5 * w[zero].sum()
    m_pos = (w[pos] * x[pos]).sum()
    m_neg = (w[neg] * x[neg]).sum()
    det = s_pos * m_neg - s_neg * m_pos
    if abs(det) < 1e-14 * max(abs(m_pos), abs(m_neg), 1e-300):
        raise OneSidedMassError(
            f"renormalization singular: side masses {s_pos:.3e}/{s_neg:.3e}"
        )
    c_pos = m_neg / det
    c_neg = -m_pos / det
    if c_pos <= 0.0 or c_neg <= 0.0:
        raise OneSidedMassError(
            f"renormalization produced negative multipliers ({c_pos:.3e}, {c_neg:.3e})"
        )
    scale = np.where(pos, c_pos, np.where(neg, c_neg, 0.5 * (c_pos + c_neg)))
    return DensitySlice(p.grid, p.values * scale)


def mean_zero_renormalize_cdf(F: MonotoneCdf) -> MonotoneCdf:
    """Mean-zero renormalization acting directly on a CDF.

    Equivalent to the density-space two-multiplier scaling, but computed
    from survival-function integrals so no finite differencing touches the
    CDF: steep CDFs lose ~8 digits through a differentiate/reintegrate
    round trip and that noise is amplified by tail quantile composition.
    """
    x, v = F.grid.nodes, F.values
    pos, neg = x > 0.0, x < 0.0
    F0 = float(np.interp(0.0, x, v))
    s_pos, s_neg = 1.0 - F0, F0
    # E[X 1_{X>0}] = integral of (1-F) over x>0; E[X 1_{X<0}] = -integral of F
    xp = np.concatenate(([0.0], x[pos]))
    sp = np.concatenate(([1.0 - F0], 1.0 - v[pos]))
    m_pos = float(np.trapezoid(sp, xp))
    xn = np.concatenate((x[neg], [0.0]))
    sn = np.concatenate((v[neg], [F0]))
    m_neg = -float(np.trapezoid(sn, xn))
    det = s_pos * m_neg - s_neg * m_pos
    if abs(det) < 1e-14 * max(abs(m_pos), abs(m_neg), 1e-300):
        raise OneSidedMassError(
            f"renormalization singular: side masses {s_pos:.3e}/{s_neg:.3e}"
        )
    c_pos = m_neg / det
    c_neg = -m_pos / det
    if c_pos <= 0.0 or c_neg <= 0.0:
        raise OneSidedMassError(
            f"renormalization produced negative multipliers ({c_pos:.3e}, {c_neg:.3e})"
        )
    new = np.where(x < 0.0, c_neg * v, 1.0 + c_pos * (v - 1.0))
    # scaling both halves from their own ends meets at x=0 only when the
    # multipliers are exact; stitch the residual mismatch at the origin
    mid = c_neg * F0
    mismatch = (1.0 + c_pos * (F0 - 1.0)) - mid
    new = np.where(x < 0.0, new, new - mismatch)
    return MonotoneCdf(F.grid, np.clip(new, 0.0, 1.0))


@dataclass
class HomogeneousPeriod:
    """Converged state of one time-homogeneous forward period."""

    t_start: float
    t_end: float
    grid: Grid
    flow: FlowSlice
    drift: DriftFn
    F_start: MonotoneCdf
    F_end: MonotoneCdf
    f_residuals: list[float] = field(default_factory=list)
    mu_residuals: list[float] = field(default_factory=list)
    F_residuals: list[float] = field(default_factory=list)
    converged: bool = False
    start_sigma: float | None = None  # mollifier width when starting from a delta

    kind = "homogeneous"

    def flow_at(self, t: float) -> FlowSlice:
        if not self.t_start <= t <= self.t_end:
            raise InvalidInputError(
                f"t={t} outside period [{self.t_start}, {self.t_end}]"
            )
        return self.flow

    def pushforward_quantile(self, q, refine: int = 6) -> np.ndarray:
        """Model quantiles of S at t_end: f o quantile of the end law.

        The end CDF is refined with a monotone cubic before the
        piecewise-linear inversion; raw node-level inversion loses ~h^2/p
        accuracy exactly where the density is thin.
        """
        return self.flow(refined_quantile(self.F_end, q, refine))


def _sup_active(delta: np.ndarray, f_vals: np.ndarray, y_max: float) -> float:
    mask = np.abs(f_vals) < y_max
    if not mask.any():
        mask = np.ones_like(f_vals, dtype=bool)
    return float(np.max(np.abs(delta[mask])))


def _check_divergence(history: list[float], tol: float, what: str) -> None:
    # A small limit cycle near the fixed point is benign (reported through
    # converged=False); only genuine blow-ups should abort.
    res = np.asarray(history)
    if not np.isfinite(res[-1]):
        raise ConvergenceError(f"{what}: residual became non-finite")
    if len(res) >= 50 and res[-1] > max(0.5 * res[0], 100.0 * res.min(), tol):
        raise ConvergenceError(
            f"{what}: residuals diverged ({res[-1]:.3e} vs best {res.min():.3e})"
        )


def calibrate_first_period(
    nu1: Marginal,
    t1: float,
    grid: Grid,
    policy: ExtrapolationPolicy,
    n_steps: int,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    mean_zero: bool = True,
    mu_max: float = DEFAULT_MU_MAX,
    scheme: str = "implicit-upwind",
    mollifier_cells: float = 2.0,
) -> HomogeneousPeriod:
    """Fixed point for the first period, starting from a near-delta at 0."""
    if t1 <= 0.0:
        raise InvalidInputError(f"first maturity must be positive, got {t1}")
    spec = PropagatorSpec(0.0, t1, n_steps, scheme=scheme)
    p0 = near_delta(grid, 0.0, mollifier_cells)
    mu = DriftFn.zero(grid)

    f_res: list[float] = []
    mu_res: list[float] = []
    f_prev = mu_prev = None
    flow = None
    F_end = None
    for _ in range(max_iter):
        p1 = propagate_density(p0, mu, spec)
        if mean_zero:
            p1 = mean_zero_renormalize(p1)
        F_end = cdf_from_density(p1)
        flow = apply_extrapolation(compose_quantile_cdf(nu1.quantile, F_end), policy)
        mu_new = drift_from_flow(flow, mu_max=mu_max, y_max=policy.y_max,
                                 cdf_values=F_end.values)
        if f_prev is not None:
            f_res.append(_sup_active(flow.values - f_prev, flow.values, policy.y_max))
            mu_res.append(float(np.max(np.abs(mu_new.values - mu_prev))))
            _check_divergence(f_res, tol, "first-period flow")
            if f_res[-1] < tol and mu_res[-1] < tol:
                mu = mu_new
                break
        f_prev, mu_prev = flow.values.copy(), mu_new.values.copy()
        mu = mu_new

    return HomogeneousPeriod(
        t_start=0.0,
        t_end=t1,
        grid=grid,
        flow=flow,
        drift=mu,
        F_start=cdf_from_density(p0),
        F_end=F_end,
        f_residuals=f_res,
        mu_residuals=mu_res,
        converged=bool(f_res and f_res[-1] < tol and mu_res[-1] < tol),
        start_sigma=mollifier_cells * grid.h,
    )


def calibrate_period(
    nu_i: Marginal,
    nu_ip1: Marginal,
    t_i: float,
    t_ip1: float,
    grid: Grid,
    policy: ExtrapolationPolicy,
    n_steps: int,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    mean_zero: bool = True,
    mu_max: float = DEFAULT_MU_MAX,
    scheme: str = "implicit-upwind",
) -> HomogeneousPeriod:
    """Joint fixed point for a later period [t_i, t_{i+1}].

    Update order per iteration: start CDF through the forward propagator
    and both marginals, then the flow by quantile matching, then the drift.
    """
    if not 0.0 < t_i < t_ip1:
        raise InvalidInputError(f"need 0 < t_i < t_ip1, got {t_i}, {t_ip1}")
    from .brownian import _quick_convex_order_check

    _quick_convex_order_check(nu_i, nu_ip1)

    spec = PropagatorSpec(t_i, t_ip1, n_steps, scheme=scheme)
    F = brownian_cdf(grid, t_i)
    mu = DriftFn.zero(grid)

    f_res: list[float] = []
    mu_res: list[float] = []
    F_res: list[float] = []
    f_prev = mu_prev = None
    flow = None
    for _ in range(max_iter):
        fwd = propagate_cdf(F, mu, spec)
        prices = np.asarray(
            nu_ip1.quantile(np.clip(fwd.values, CDF_CLIP, 1.0 - CDF_CLIP)),
            dtype=np.float64,
        )
        new_vals = np.clip(np.asarray(nu_i.cdf(prices), dtype=np.float64), 0.0, 1.0)
        F_new = MonotoneCdf(grid, new_vals)
        if mean_zero:
            F_new = mean_zero_renormalize_cdf(F_new)
        flow = apply_extrapolation(compose_quantile_cdf(nu_i.quantile, F_new), policy)
        mu_new = drift_from_flow(flow, mu_max=mu_max, y_max=policy.y_max,
                                 cdf_values=F_new.values)

        F_res.append(float(np.max(np.abs(F_new.values - F.values))))
        if f_prev is not None:
            f_res.append(_sup_active(flow.values - f_prev, flow.values, policy.y_max))
            mu_res.append(float(np.max(np.abs(mu_new.values - mu_prev))))
            _check_divergence(f_res, tol, "period flow")
            if f_res[-1] < tol and mu_res[-1] < tol and F_res[-1] < tol:
                F, mu = F_new, mu_new
                break
        f_prev, mu_prev = flow.values.copy(), mu_new.values.copy()
        F, mu = F_new, mu_new

    F_end = propagate_cdf(F, mu, spec)
    done = bool(
        f_res and f_res[-1] < tol and mu_res[-1] < tol and F_res[-1] < tol
    )
    return HomogeneousPeriod(
        t_start=t_i,
        t_end=t_ip1,
        grid=grid,
        flow=flow,
        drift=mu,
        F_start=F,
        F_end=F_end,
        f_residuals=f_res,
        mu_residuals=mu_res,
        F_residuals=F_res,
        converged=done,
    )


def convergence_rate(residuals: list[float], lo: int, hi: int) -> float:
    """Geometric rate r from a least-squares fit of log residual ~ r^n.

    ``lo``/``hi`` are 1-based iteration indices, inclusive, clipped to the
    available history.
    """
    res = np.asarray(residuals, dtype=np.float64)
    hi = min(hi, res.size)
    lo = max(lo, 1)
    if hi - lo < 2:
        raise InvalidInputError(
            f"window [{lo}, {hi}] too short for a rate estimate "
            f"({res.size} residuals available)"
        )
    window = res[lo - 1: hi]
    if np.any(window <= 0.0):
        return 0.0
    n = np.arange(lo, hi + 1, dtype=np.float64)
    slope = np.polyfit(n, np.log(window), 1)[0]
    return float(np.exp(slope))
