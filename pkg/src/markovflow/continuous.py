"""Flow functions continuous in time and across maturities.

A period [T_i, T_{i+1}] interpolates its endpoint flow slices with an
a + b/sqrt(t) term structure (or log-linear variant), which fixes the
time derivative entering the time-dependent drift relation

    mu(t, x) = -(df/dt + 0.5 d2f/dx2) / (df/dx).

Each period consumes the previous period's converged end state, so the
flow (hence the local volatility) is continuous at the shared maturity
and Monte-Carlo paths need no stitching map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, InvalidInputError
from .fokker_planck import (
    DEFAULT_MU_MAX,
    DriftFn,
    PropagatorSpec,
    propagate_density,
)
from .grids import (
    CDF_CLIP,
    FlowSlice,
    Grid,
    MonotoneCdf,
    cdf_from_density,
    compose_quantile_cdf,
    refined_quantile,
)
from .homogeneous import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    DERIV_EPS,
    EDGE_GUARD,
    ExtrapolationPolicy,
    _sup_active,
    apply_extrapolation,
)
from .marginals import Marginal

RULE_KINDS = ("inverse-sqrt", "log-linear")


@dataclass(frozen=True)
class TermStructureRule:
    """Interpolation of a flow function between two maturity snapshots."""

    kind: str
    t_lo: float
    t_hi: float
    f_lo: FlowSlice
    f_hi: FlowSlice

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise InvalidInputError(f"unknown term-structure rule {self.kind!r}")
        if not 0.0 < self.t_lo < self.t_hi:
            raise InvalidInputError(
                f"need 0 < t_lo < t_hi, got [{self.t_lo}, {self.t_hi}]"
            )
        if self.kind == "log-linear" and (
            self.f_lo.values.min() <= 0.0 or self.f_hi.values.min() <= 0.0
        ):
            raise InvalidInputError(
                "log-linear term structure needs strictly positive flow values"
            )

    def weights(self, t: float) -> tuple[float, float]:
        """Endpoint weights at time t; nonnegative, sum to one.

        inverse-sqrt weights come from the a + b/sqrt(t) ansatz; the
        log-linear rule weights affinely in t (so a lognormal target on a
        Brownian flow is represented exactly).
        """
        self._check_time(t)
        if self.kind == "log-linear":
            w_lo = (self.t_hi - t) / (self.t_hi - self.t_lo)
            return float(w_lo), float(1.0 - w_lo)
        s_lo, s_hi = np.sqrt(self.t_lo), np.sqrt(self.t_hi)
        w_lo = (np.sqrt(self.t_lo * self.t_hi / t) - s_lo) / (s_hi - s_lo)
        return float(w_lo), float(1.0 - w_lo)

    def weights_dt(self, t: float) -> float:
        """d w_lo / dt (and d w_hi / dt = -d w_lo / dt)."""
        self._check_time(t)
        if self.kind == "log-linear":
            return float(-1.0 / (self.t_hi - self.t_lo))
        s_lo, s_hi = np.sqrt(self.t_lo), np.sqrt(self.t_hi)
        return float(-0.5 * np.sqrt(self.t_lo * self.t_hi) / (t**1.5 * (s_hi - s_lo)))

    def slice_values(self, t: float) -> np.ndarray:
        w_lo, w_hi = self.weights(t)
        if self.kind == "log-linear":
            return np.exp(
                w_lo * np.log(self.f_lo.values) + w_hi * np.log(self.f_hi.values)
            )
        return w_lo * self.f_lo.values + w_hi * self.f_hi.values

    def dfdt_values(self, t: float) -> np.ndarray:
        dw = self.weights_dt(t)
        if self.kind == "log-linear":
            return self.slice_values(t) * dw * (
                np.log(self.f_lo.values) - np.log(self.f_hi.values)
            )
        return dw * (self.f_lo.values - self.f_hi.values)

    def _check_time(self, t: float) -> None:
        if not self.t_lo <= t <= self.t_hi:
            raise InvalidInputError(
                f"t={t} outside period [{self.t_lo}, {self.t_hi}]"
            )

    @property
    def grid(self) -> Grid:
        return self.f_lo.grid


def interp_flow(rule: TermStructureRule, t: float) -> FlowSlice:
    """Flow slice at time t; reproduces the endpoint slices exactly."""
    if t == rule.t_lo:
        return rule.f_lo
    if t == rule.t_hi:
        return rule.f_hi
    return FlowSlice(rule.grid, rule.slice_values(t))


def drift_from_flow_td(
    rule: TermStructureRule,
    t: float,
    mu_max: float = DEFAULT_MU_MAX,
    eps: float = DERIV_EPS,
    y_max: float | None = None,
    ramp_frac: float = 0.05,
    cdf_values: np.ndarray | None = None,
    cdf_cut: float = 1e-9,
) -> DriftFn:
    """Time-dependent drift mu = -(df/dt + f''/2) / f' at time t.

    df/dt comes analytically from the term-structure weights; spatial
    derivatives are central differences.  Drift is zero where f' <= eps or
    |f| exceeds y_max (the extrapolated tails), with a continuous ramp.
    """
    h = rule.grid.h
    v = rule.slice_values(t)
    dfdt = rule.dfdt_values(t)
    fp = np.gradient(v, h)
    fpp = np.zeros_like(v)
    fpp[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (h * h)
    mu = np.zeros_like(v)
    active = fp > max(eps, 1e-7 * float(fp.max()))
    np.divide(-(dfdt + 0.5 * fpp), fp, out=mu, where=active)
    mu[~active] = 0.0
    mu[:EDGE_GUARD] = 0.0
    mu[-EDGE_GUARD:] = 0.0
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
    return DriftFn(rule.grid, mu, mu_max=mu_max)


@dataclass
class ContinuousPeriod:
    """Converged state of one continuous-flow forward period."""

    t_start: float
    t_end: float
    grid: Grid
    rule: TermStructureRule
    F_start: MonotoneCdf
    F_end: MonotoneCdf
    drift_steps: np.ndarray  # (n_steps, n) drift used by the final propagation
    f_residuals: list[float] = field(default_factory=list)
    converged: bool = False
    y_max: float | None = None
    mu_max: float = DEFAULT_MU_MAX

    kind = "continuous"

    @property
    def f_start(self) -> FlowSlice:
        return self.rule.f_lo

    @property
    def f_end(self) -> FlowSlice:
        return self.rule.f_hi

    def flow_at(self, t: float) -> FlowSlice:
        return interp_flow(self.rule, t)

    def drift_at(self, t: float) -> DriftFn:
        return drift_from_flow_td(
            self.rule, t, mu_max=self.mu_max, y_max=self.y_max,
            cdf_values=self.F_end.values,
        )

    def pushforward_quantile(self, q, refine: int = 6) -> np.ndarray:
        return self.f_end(refined_quantile(self.F_end, q, refine))


def _step_drifts(
    rule: TermStructureRule,
    spec: PropagatorSpec,
    mu_max: float,
    y_max: float | None,
    cdf_values: np.ndarray | None = None,
) -> np.ndarray:
    """Drift rows per sub-step, evaluated at the step midpoints."""
    rows = np.empty((spec.n_steps, rule.grid.n))
    for k in range(spec.n_steps):
        t_mid = spec.t0 + (k + 0.5) * spec.dt
        rows[k] = drift_from_flow_td(rule, t_mid, mu_max=mu_max, y_max=y_max,
                                     cdf_values=cdf_values).values
    return rows


def calibrate_continuous_period(
    prev_F: MonotoneCdf,
    prev_f: FlowSlice,
    nu_ip1: Marginal,
    t_i: float,
    t_ip1: float,
    grid: Grid,
    policy: ExtrapolationPolicy,
    n_steps: int,
    rule_kind: str = "inverse-sqrt",
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    mu_max: float = DEFAULT_MU_MAX,
    scheme: str = "implicit-upwind",
    relax: float = 1.0,
) -> ContinuousPeriod:
    """Fixed point for a continuous period seeded by the previous period.

    Iterates: propagate the start density under the current drift surface,
    quantile-match the end slice, rebuild the term structure, refresh the
    per-step drifts; starting from zero drift.

    ``relax`` < 1 under-relaxes the end-slice update.  The undamped
    iteration has loop gain near one when the maturity ratio t_ip1/t_i is
    close to one (the term-structure weight derivative scales like
    1/(sqrt(t_ip1) - sqrt(t_i))), and damping restores contraction there.
    """
    if not 0.0 < relax <= 1.0:
        raise InvalidInputError(f"relax must be in (0, 1], got {relax}")
    if t_ip1 < t_i:
        raise InvalidInputError(f"need t_ip1 >= t_i, got {t_i}, {t_ip1}")
    if prev_f.grid is not grid and not np.array_equal(prev_f.grid.nodes, grid.nodes):
        raise InvalidInputError("previous flow slice lives on a different grid")

    p_start = prev_F.density()
    spec = PropagatorSpec(t_i, t_ip1, n_steps, scheme=scheme)
    if t_ip1 == t_i:
        rule = TermStructureRule(rule_kind, t_i, t_i + 1.0, prev_f, prev_f)
        return ContinuousPeriod(
            t_start=t_i, t_end=t_ip1, grid=grid, rule=rule, F_start=prev_F,
            F_end=prev_F, drift_steps=np.zeros((1, grid.n)), converged=True,
            y_max=policy.y_max, mu_max=mu_max,
        )

    mu_rows = np.zeros((n_steps, grid.n))
    f_res: list[float] = []
    f_end_prev = None
    rule = None
    F_end = None
    for _ in range(max_iter):
        drift = DriftFn(grid, mu_rows, mu_max=mu_max)
        p_end = propagate_density(p_start, drift, spec)
        F_end = cdf_from_density(p_end)
        f_end = apply_extrapolation(
            compose_quantile_cdf(nu_ip1.quantile, F_end), policy
        )
        if relax < 1.0 and f_end_prev is not None:
            blend = (1.0 - relax) * f_end_prev + relax * f_end.values
            f_end = FlowSlice(grid, blend, extrap_lo=f_end.extrap_lo,
                              extrap_hi=f_end.extrap_hi)
        rule = TermStructureRule(rule_kind, t_i, t_ip1, prev_f, f_end)
        mu_rows = _step_drifts(rule, spec, mu_max, policy.y_max, F_end.values)
        if f_end_prev is not None:
            f_res.append(
                _sup_active(f_end.values - f_end_prev, f_end.values, policy.y_max)
            )
            if not np.isfinite(f_res[-1]):
                raise ConvergenceError("continuous-period residual became non-finite")
            if f_res[-1] < tol:
                break
        f_end_prev = f_end.values.copy()

    return ContinuousPeriod(
        t_start=t_i,
        t_end=t_ip1,
        grid=grid,
        rule=rule,
        F_start=prev_F,
        F_end=F_end,
        drift_steps=mu_rows,
        f_residuals=f_res,
        converged=bool(f_res and f_res[-1] < tol),
        y_max=policy.y_max,
        mu_max=mu_max,
    )
