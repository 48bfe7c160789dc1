"""Model surface assembly, local-vol conversion, BBF check, Monte Carlo.

A ModelSurface is an ordered chain of calibrated periods (brownian,
homogeneous, or continuous).  S paths are continuous across period
boundaries: either through the stitching map X -> f_next^{-1}(f_prev(X)),
or trivially for continuous chains where the boundary slices coincide.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .brownian import BrownianPeriod
from .continuous import ContinuousPeriod
from .errors import BracketError, InvalidInputError, MonotonicityError
from .fokker_planck import DriftFn
from .grids import FlowSlice, Grid, refined_quantile
from .homogeneous import HomogeneousPeriod
from .marginals import Marginal, MarginalSet

Period = BrownianPeriod | HomogeneousPeriod | ContinuousPeriod


@dataclass
class ModelSurface:
    """Ordered calibrated periods covering [0, T] plus the spot anchor."""

    spot: float
    periods: list[Period]
    scheme: str = ""

    def __post_init__(self):
        if not self.periods:
            raise InvalidInputError("surface needs at least one period")
        t = 0.0
        for p in self.periods:
            if abs(p.t_start - t) > 1e-12:
                raise InvalidInputError(
                    f"periods do not partition the horizon: gap at t={t}"
                )
            t = p.t_end

    @property
    def maturities(self) -> np.ndarray:
        return np.array([p.t_end for p in self.periods])

    @property
    def horizon(self) -> float:
        return float(self.periods[-1].t_end)

    def period_at(self, t: float) -> Period:
        if not 0.0 <= t <= self.horizon:
            raise InvalidInputError(f"t={t} outside [0, {self.horizon}]")
        for p in self.periods:
            if t <= p.t_end:
                return p
        return self.periods[-1]

    def flow_at(self, t: float) -> FlowSlice:
        return self.period_at(t).flow_at(t)


@dataclass
class LocalVolCurve:
    """sigma_loc sampled on a monotone y-grid, linearly interpolated."""

    y: np.ndarray
    sigma: np.ndarray

    def __call__(self, y):
        return np.interp(y, self.y, self.sigma)


def local_vol_from_flow(
    f: FlowSlice,
    strike_bounds: tuple[float, float] | None = None,
    eps: float = 1e-12,
) -> LocalVolCurve:
    """sigma_loc(y) = f'(f^{-1}(y)) with central-difference f'.

    With strike bounds (k_min, k_max) the curve is clipped to
    [0.85 k_min, 1.15 k_max].
    """
    deriv = f.derivative()
    y = f.values
    keep = deriv > eps
    if keep.sum() < 2:
        raise MonotonicityError("flow slice is not invertible anywhere")
    y_keep, s_keep = y[keep], deriv[keep]
    if np.any(np.diff(y_keep) <= 0.0):
        order = np.argsort(y_keep, kind="stable")
        y_keep, s_keep = y_keep[order], s_keep[order]
        good = np.concatenate(([True], np.diff(y_keep) > 0.0))
        y_keep, s_keep = y_keep[good], s_keep[good]
    if strike_bounds is not None:
        k_min, k_max = strike_bounds
        lo, hi = 0.85 * k_min, 1.15 * k_max
        mask = (y_keep >= lo) & (y_keep <= hi)
        if mask.sum() < 2:
            raise InvalidInputError("strike bounds exclude the whole curve")
        y_keep, s_keep = y_keep[mask], s_keep[mask]
    return LocalVolCurve(y_keep, s_keep)


def flow_from_local_vol(
    sigma: LocalVolCurve,
    grid: Grid,
    anchor: tuple[float, float] = (0.0, 0.0),
    refine: int = 16,
) -> FlowSlice:
    """Solve f' = sigma_loc(f) by quadrature of dx = df / sigma(f).

    The local-vol curve is extended by its edge values beyond its support,
    which continues the flow linearly (consistent with the tail policy).
    """
    x0, s0 = anchor
    if np.any(sigma.sigma <= 0.0):
        raise InvalidInputError("local volatility must be positive")
    y_lo, y_hi = float(sigma.y[0]), float(sigma.y[-1])
    if not y_lo <= s0 <= y_hi:
        raise InvalidInputError(f"anchor value {s0} outside the curve support")
    span_x = grid.hi - grid.lo
    sig_edge = float(min(sigma.sigma[0], sigma.sigma[-1]))
    pad = 1.25 * span_x * max(sigma.sigma.max(), 1.0) + 1.0
    y_fine = np.linspace(y_lo - pad, y_hi + pad,
                         refine * (grid.n + int(np.ceil(2 * pad / max(grid.h, 1e-12)))))
    inv = 1.0 / np.maximum(sigma(y_fine), 1e-300)
    # cumulative integral of 1/sigma, anchored so that x(s0) = x0
    x_of_y = np.concatenate(
        ([0.0], np.cumsum(0.5 * (inv[1:] + inv[:-1]) * np.diff(y_fine)))
    )
    x_of_y += x0 - np.interp(s0, y_fine, x_of_y)
    if x_of_y[0] > grid.lo or x_of_y[-1] < grid.hi:
        raise InvalidInputError("local-vol curve cannot cover the grid range")
    vals = np.interp(grid.nodes, x_of_y, y_fine)
    return FlowSlice(grid, vals)


def bbf_short_flow(
    sigma_imp,
    spot: float,
    x0: float,
    grid: Grid,
    search_width: float = 60.0,
    n_search: int = 200001,
) -> FlowSlice:
    """Short-maturity flow from the implied-vol skew.

    Solves (f - spot) / sigma_imp(f) = x - x0 per node; the left side must
    be strictly increasing in f, which holds for positive regular skews.
    """
    half = search_width * max(abs(grid.lo), abs(grid.hi), 1.0) / 10.0
    f_grid = spot + np.linspace(-half, half, n_search)
    sig = np.asarray(sigma_imp(f_grid), dtype=np.float64)
    if np.any(~np.isfinite(sig)) or np.any(sig <= 0.0):
        raise BracketError("implied skew must be positive and finite on the bracket")
    gvals = (f_grid - spot) / sig
    if np.any(np.diff(gvals) <= 0.0):
        raise BracketError("(f - spot) / sigma_imp(f) is not strictly increasing")
    rhs = grid.nodes - x0
    if rhs[0] < gvals[0] or rhs[-1] > gvals[-1]:
        raise BracketError("search bracket does not cover the grid range")
    vals = np.interp(rhs, gvals, f_grid)
    return FlowSlice(grid, vals)


@dataclass
class PathSet:
    """Per-maturity snapshots of simulated S paths plus stitch diagnostics."""

    maturities: np.ndarray
    snapshots: np.ndarray  # (n_maturities, n_paths), S at each T_i (left limit)
    seed: int
    n_clamped: int = 0
    stitch_residual_max: float = 0.0

    @property
    def n_paths(self) -> int:
        return self.snapshots.shape[1]

    def summary(self, targets: MarginalSet | None = None) -> dict:
        out = {
            "n_paths": self.n_paths,
            "seed": self.seed,
            "stitch_clamped": self.n_clamped,
            "stitch_residual_max": self.stitch_residual_max,
            "maturities": [],
        }
        for i, t in enumerate(self.maturities):
            s = self.snapshots[i]
            entry = {
                "t": float(t),
                "mean": float(s.mean()),
                "stderr": float(s.std(ddof=1) / np.sqrt(s.size)),
            }
            if targets is not None:
                entry["ks"] = ks_distance(s, targets.marginals[i])
            out["maturities"].append(entry)
        return out


def ks_distance(samples: np.ndarray, marginal: Marginal) -> float:
    """Kolmogorov-Smirnov sup distance of an empirical sample to a marginal."""
    s = np.sort(samples)
    n = s.size
    cdf = np.asarray(marginal.cdf(s), dtype=np.float64)
    upper = np.arange(1, n + 1) / n
    lower = np.arange(0, n) / n
    return float(np.max(np.maximum(np.abs(cdf - upper), np.abs(cdf - lower))))


def _period_drift_rows(period: Period, n_steps: int) -> np.ndarray | None:
    """Drift rows for the Euler march of one period; None for driftless."""
    if isinstance(period, BrownianPeriod):
        return None
    if isinstance(period, HomogeneousPeriod):
        return period.drift.values
    dt = (period.t_end - period.t_start) / n_steps
    rows = np.empty((n_steps, period.grid.n))
    for k in range(n_steps):
        rows[k] = period.drift_at(period.t_start + (k + 0.5) * dt).values
    return rows


def simulate(
    surface: ModelSurface,
    n_paths: int,
    steps_per_period: int = 32,
    seed: int = 0,
) -> PathSet:
    """Euler-simulate S = f(t, X) with path-wise boundary stitching.

    Normals come from a counter-based Philox generator keyed by the seed,
    so results are reproducible bit for bit.  Snapshots at each maturity
    are taken from the left period's flow (S at T_i^-); stitches landing
    outside the next grid clamp to the edge and are counted.
    """
    if n_paths < 1 or steps_per_period < 1:
        raise InvalidInputError("need n_paths >= 1 and steps_per_period >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    first = surface.periods[0]

    if isinstance(first, BrownianPeriod):
        x = np.full(n_paths, first.start_point if first.start_point is not None else 0.0)
    elif isinstance(first, HomogeneousPeriod) and first.start_sigma is not None:
        # the calibrated initial law is the mollified delta, not an exact point
        x = first.start_sigma * rng.standard_normal(n_paths)
    else:
        x = np.zeros(n_paths)

    snapshots = np.empty((len(surface.periods), n_paths))
    n_clamped = 0
    stitch_resid = 0.0
    prev_end_slice: FlowSlice | None = None

    for i, period in enumerate(surface.periods):
        if i > 0:
            next_slice = period.flow_at(period.t_start)
            if isinstance(period, ContinuousPeriod):
                # boundary slices coincide by construction: X passes through
                pass
            else:
                s_prev = snapshots[i - 1]
                x = np.asarray(next_slice.inverse(s_prev), dtype=np.float64)
                lo, hi = period.grid.lo, period.grid.hi
                clamped = (x < lo) | (x > hi)
                n_clamped += int(clamped.sum())
                x = np.clip(x, lo, hi)
                back = np.asarray(next_slice(x), dtype=np.float64)
                ok = ~clamped
                if ok.any():
                    stitch_resid = max(
                        stitch_resid, float(np.abs(back[ok] - s_prev[ok]).max())
                    )
        dt = (period.t_end - period.t_start) / steps_per_period
        normals = rng.standard_normal((steps_per_period, n_paths))
        mu_rows = _period_drift_rows(period, steps_per_period)
        if mu_rows is None:
            x = x + np.sqrt(dt) * normals.sum(axis=0)
        else:
            x = kernels.euler_paths(
                np.ascontiguousarray(x), normals, mu_rows,
                period.grid.lo, period.grid.h, dt,
            )
        end_slice = period.flow_at(period.t_end)
        snapshots[i] = end_slice(x)
        prev_end_slice = end_slice

    return PathSet(
        maturities=surface.maturities,
        snapshots=snapshots,
        seed=seed,
        n_clamped=n_clamped,
        stitch_residual_max=stitch_resid,
    )


@dataclass
class SurfaceTable:
    """Flat (t, y, sigma_loc, period_kind) table of a local-vol surface."""

    t: np.ndarray
    y: np.ndarray
    sigma: np.ndarray
    period_kind: list[str]

    def to_csv(self, path: str, header_lines: list[str] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow(["t", "y", "sigma_loc", "period_kind"])
            for row in zip(self.t, self.y, self.sigma, self.period_kind):
                writer.writerow([f"{row[0]:.12g}", f"{row[1]:.12g}",
                                 f"{row[2]:.12g}", row[3]])


def export_surface(
    surface: ModelSurface,
    t_grid: np.ndarray,
    y_grid: np.ndarray,
    strike_bounds: tuple[float, float] | None = None,
) -> SurfaceTable:
    """Sample sigma_loc(t, y) on a product grid with period provenance."""
    t_grid = np.asarray(t_grid, dtype=np.float64)
    y_grid = np.asarray(y_grid, dtype=np.float64)
    ts, ys, sig, kinds = [], [], [], []
    for t in t_grid:
        period = surface.period_at(t)
        curve = local_vol_from_flow(period.flow_at(t), strike_bounds)
        vals = curve(y_grid)
        ts.extend([t] * y_grid.size)
        ys.extend(y_grid.tolist())
        sig.extend(np.asarray(vals).tolist())
        kinds.extend([period.kind] * y_grid.size)
    return SurfaceTable(np.array(ts), np.array(ys), np.array(sig), kinds)


def surface_pushforward_quantile(surface: ModelSurface, i: int, q, refine: int = 6):
    """Model quantiles of S at maturity T_i (left limit), per period kind."""
    period = surface.periods[i]
    if isinstance(period, BrownianPeriod):
        if period.start_point is not None:
            from .black import norm_ppf

            tau = period.t_end - period.t_start
            x_q = period.start_point + np.sqrt(tau) * norm_ppf(np.asarray(q))
            return period.terminal_flow(x_q)
        return period.terminal_flow(refined_quantile(period.end_cdf(), q, refine))
    return period.pushforward_quantile(q, refine)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _slice_to_dict(f: FlowSlice) -> dict:
    return {
        "values": f.values.tolist(),
        "extrap_lo": f.extrap_lo,
        "extrap_hi": f.extrap_hi,
    }


def surface_to_json(surface: ModelSurface, meta: dict | None = None) -> str:
    periods = []
    for p in surface.periods:
        entry = {
            "kind": p.kind,
            "t_start": p.t_start,
            "t_end": p.t_end,
            "grid": {"n": p.grid.n, "lo": p.grid.lo, "hi": p.grid.hi},
        }
        if isinstance(p, BrownianPeriod):
            entry["terminal_flow"] = _slice_to_dict(p.terminal_flow)
            entry["F_start"] = p.F_start.values.tolist()
            entry["start_point"] = p.start_point
        elif isinstance(p, HomogeneousPeriod):
            entry["flow"] = _slice_to_dict(p.flow)
            entry["drift"] = p.drift.values.tolist()
            entry["F_start"] = p.F_start.values.tolist()
            entry["F_end"] = p.F_end.values.tolist()
            entry["start_sigma"] = p.start_sigma
        else:
            entry["rule_kind"] = p.rule.kind
            entry["f_start"] = _slice_to_dict(p.f_start)
            entry["f_end"] = _slice_to_dict(p.f_end)
            entry["F_start"] = p.F_start.values.tolist()
            entry["F_end"] = p.F_end.values.tolist()
            entry["drift_steps"] = p.drift_steps.tolist()
            entry["y_max"] = p.y_max
        periods.append(entry)
    doc = {"spot": surface.spot, "scheme": surface.scheme, "periods": periods}
    if meta:
        doc["meta"] = meta
    return json.dumps(doc)


def surface_from_json(text: str) -> ModelSurface:
    from .grids import Grid, MonotoneCdf
    from .continuous import TermStructureRule

    doc = json.loads(text)
    periods: list[Period] = []
    for e in doc["periods"]:
        grid = Grid(np.linspace(e["grid"]["lo"], e["grid"]["hi"], e["grid"]["n"]))

        def mk_slice(d):
            return FlowSlice(grid, np.array(d["values"]),
                             extrap_lo=d["extrap_lo"], extrap_hi=d["extrap_hi"])

        if e["kind"] == "brownian":
            periods.append(BrownianPeriod(
                t_start=e["t_start"], t_end=e["t_end"], grid=grid,
                F_start=MonotoneCdf(grid, np.array(e["F_start"])),
                terminal_flow=mk_slice(e["terminal_flow"]),
                start_point=e["start_point"],
            ))
        elif e["kind"] == "homogeneous":
            periods.append(HomogeneousPeriod(
                t_start=e["t_start"], t_end=e["t_end"], grid=grid,
                flow=mk_slice(e["flow"]),
                drift=DriftFn(grid, np.array(e["drift"])),
                F_start=MonotoneCdf(grid, np.array(e["F_start"])),
                F_end=MonotoneCdf(grid, np.array(e["F_end"])),
                converged=True,
                start_sigma=e["start_sigma"],
            ))
        else:
            rule = TermStructureRule(
                e["rule_kind"], e["t_start"], e["t_end"],
                mk_slice(e["f_start"]), mk_slice(e["f_end"]),
            )
            periods.append(ContinuousPeriod(
                t_start=e["t_start"], t_end=e["t_end"], grid=grid, rule=rule,
                F_start=MonotoneCdf(grid, np.array(e["F_start"])),
                F_end=MonotoneCdf(grid, np.array(e["F_end"])),
                drift_steps=np.array(e["drift_steps"]),
                converged=True,
                y_max=e["y_max"],
            ))
    return ModelSurface(spot=doc["spot"], periods=periods, scheme=doc.get("scheme", ""))
