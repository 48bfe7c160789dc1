"""Uniform grids, monotone CDFs, flow slices, and quantile inversion.

These are the shared currencies of every solver in the package: a uniform
spatial grid, a nondecreasing distribution function on that grid with a
piecewise-linear inverse, a normalized density slice, and a monotone flow
slice with linear extrapolation tails.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, MonotonicityError, ProbabilityError

# CDF values are clipped into this open interval before being composed with
# target quantile functions, whose values diverge at 0 and 1.
CDF_CLIP = 1e-15

# Wiggles smaller than this (relative to value scale) are treated as float
# noise and flattened; anything larger signals corrupted data.
_MONOTONE_SLACK = 1e-9


def _enforce_nondecreasing(values: np.ndarray, scale: float, what: str) -> np.ndarray:
    """Flatten sub-tolerance wiggles; raise on genuine monotonicity breaks."""
    diffs = np.diff(values)
    worst = diffs.min() if diffs.size else 0.0
    if worst < -_MONOTONE_SLACK * scale:
        raise MonotonicityError(
            f"{what} is not nondecreasing: worst step {worst:.3e} "
            f"(scale {scale:.3e})"
        )
    if worst < 0.0:
        values = np.maximum.accumulate(values)
    return values


@dataclass(frozen=True)
class Grid:
    """Uniform spatial grid x_1 < ... < x_N."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        object.__setattr__(self, "nodes", nodes)
        if nodes.ndim != 1 or nodes.size < 3:
            raise InvalidInputError(f"grid needs >= 3 nodes, got shape {nodes.shape}")
        steps = np.diff(nodes)
        if steps.min() <= 0.0:
            raise InvalidInputError("grid nodes must be strictly increasing")
        span = nodes[-1] - nodes[0]
        if np.abs(steps - steps[0]).max() > 1e-12 * span:
            raise InvalidInputError("grid spacing is not uniform")

    @property
    def n(self) -> int:
        return self.nodes.size

    @property
    def h(self) -> float:
        return (self.nodes[-1] - self.nodes[0]) / (self.nodes.size - 1)

    @property
    def lo(self) -> float:
        return float(self.nodes[0])

    @property
    def hi(self) -> float:
        return float(self.nodes[-1])

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w


def build_uniform_grid(n: int, lo: float, hi: float) -> Grid:
    """n equally spaced nodes on [lo, hi], endpoints exact."""
    if n < 3:
        raise InvalidInputError(f"need n >= 3 nodes, got {n}")
    if not lo < hi:
        raise InvalidInputError(f"need lo < hi, got [{lo}, {hi}]")
    return Grid(np.linspace(lo, hi, n))


@dataclass(frozen=True)
class DensitySlice:
    """Nonnegative density on a grid, normalized to unit trapezoidal mass."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.n,):
            raise InvalidInputError("density shape does not match grid")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("density has non-finite entries")
        if v.min() < -1e-9 * max(v.max(), 1.0):
            raise InvalidInputError(f"density has negative entries: min {v.min():.3e}")
        v = np.maximum(v, 0.0)
        mass = np.trapezoid(v, self.grid.nodes)
        if mass <= 0.0:
            raise InvalidInputError("density has no mass")
        object.__setattr__(self, "values", v / mass)

    def mean(self) -> float:
        return float(np.trapezoid(self.values * self.grid.nodes, self.grid.nodes))


@dataclass(frozen=True)
class MonotoneCdf:
    """Nondecreasing distribution function sampled on a grid.

    Quantile inversion is piecewise linear; flat segments are resolved to
    the midpoint of the flat interval, and quantiles are clamped to the
    grid range.
    """

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.n,):
            raise InvalidInputError("cdf shape does not match grid")
        v = _enforce_nondecreasing(v, 1.0, "CDF")
        v = np.clip(v, 0.0, 1.0)
        if v[0] > 1e-9:
            raise InvalidInputError(f"CDF does not start at 0: first value {v[0]:.3e}")
        if v[-1] < 1.0 - 1e-9:
            raise InvalidInputError(f"CDF does not reach 1: last value {v[-1]:.10f}")
        object.__setattr__(self, "values", v)

    def __call__(self, x: np.ndarray | float) -> np.ndarray | float:
        return np.interp(x, self.grid.nodes, self.values)

    def quantile(self, q: np.ndarray | float) -> np.ndarray | float:
        q_arr = np.asarray(q, dtype=np.float64)
        if np.any(q_arr < 0.0) or np.any(q_arr > 1.0):
            raise ProbabilityError(f"probability outside [0, 1]: {q!r}")
        v, x = self.values, self.grid.nodes
        # Midpoints of flat runs give a deterministic inverse on plateaus.
        uniq, first = np.unique(v, return_index=True)
        last = np.searchsorted(v, uniq, side="right") - 1
        mid = 0.5 * (x[first] + x[last])
        out = np.interp(q_arr, uniq, mid, left=x[0], right=x[-1])
        return out if isinstance(q, np.ndarray) else float(out)

    def density(self) -> DensitySlice:
        """Finite-difference density, floored at 0 and renormalized."""
        p = np.gradient(self.values, self.grid.h)
        return DensitySlice(self.grid, np.maximum(p, 0.0))


def quantile(cdf: MonotoneCdf, q: np.ndarray | float) -> np.ndarray | float:
    return cdf.quantile(q)


def refined_quantile(cdf: MonotoneCdf, q, refine: int = 6):
    """Quantile through a monotone-cubic refinement of the sampled CDF.

    Node-level piecewise-linear inversion carries an O(h^2 |p'|/p) error
    that blows up in thin-density tails; PCHIP refinement keeps the
    inversion faithful to the smooth CDF the samples came from.
    """
    from scipy.interpolate import PchipInterpolator

    if refine <= 1:
        return cdf.quantile(q)
    x = cdf.grid.nodes
    fine_x = np.linspace(x[0], x[-1], (x.size - 1) * refine + 1)
    fine_v = PchipInterpolator(x, cdf.values)(fine_x)
    fine_v = np.maximum.accumulate(np.clip(fine_v, 0.0, 1.0))
    q_arr = np.asarray(q, dtype=np.float64)
    if np.any(q_arr < 0.0) or np.any(q_arr > 1.0):
        raise ProbabilityError(f"probability outside [0, 1]: {q!r}")
    uniq, first = np.unique(fine_v, return_index=True)
    last = np.searchsorted(fine_v, uniq, side="right") - 1
    mid = 0.5 * (fine_x[first] + fine_x[last])
    out = np.interp(q_arr, uniq, mid, left=fine_x[0], right=fine_x[-1])
    return out if isinstance(q, np.ndarray) else float(out)


def cdf_from_density(p: DensitySlice) -> MonotoneCdf:
    """Trapezoidal cumulative integral, clamped to [0, 1]."""
    v = p.values
    inc = 0.5 * (v[1:] + v[:-1]) * p.grid.h
    cum = np.concatenate(([0.0], np.cumsum(inc)))
    return MonotoneCdf(p.grid, np.clip(cum, 0.0, 1.0))


@dataclass(frozen=True)
class FlowSlice:
    """Monotone flow function f at one time, with linear extrapolation tails.

    ``extrap_lo``/``extrap_hi`` mark the joints beyond which the values were
    replaced by tangent lines (see homogeneous.apply_extrapolation); the
    drift builders force zero drift outside the joints.
    """

    grid: Grid
    values: np.ndarray
    extrap_lo: int | None = None
    extrap_hi: int | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.n,):
            raise InvalidInputError("flow shape does not match grid")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("flow has non-finite entries")
        scale = max(np.abs(v).max(), 1.0)
        v = _enforce_nondecreasing(v, scale, "flow slice")
        object.__setattr__(self, "values", v)

    def __call__(self, x: np.ndarray | float) -> np.ndarray | float:
        """Piecewise-linear evaluation with linear tail extrapolation."""
        nodes, v, h = self.grid.nodes, self.values, self.grid.h
        out = np.interp(x, nodes, v)
        slope_l = (v[1] - v[0]) / h
        slope_r = (v[-1] - v[-2]) / h
        x_arr = np.asarray(x, dtype=np.float64)
        out = np.where(x_arr < nodes[0], v[0] + slope_l * (x_arr - nodes[0]), out)
        out = np.where(x_arr > nodes[-1], v[-1] + slope_r * (x_arr - nodes[-1]), out)
        return out if isinstance(x, np.ndarray) else float(out)

    def inverse(self, y: np.ndarray | float) -> np.ndarray | float:
        """Piecewise-linear inverse; plateaus resolve to run midpoints."""
        nodes, v, h = self.grid.nodes, self.values, self.grid.h
        uniq, first = np.unique(v, return_index=True)
        last = np.searchsorted(v, uniq, side="right") - 1
        mid = 0.5 * (nodes[first] + nodes[last])
        out = np.interp(y, uniq, mid)
        slope_l = (v[1] - v[0]) / h
        slope_r = (v[-1] - v[-2]) / h
        y_arr = np.asarray(y, dtype=np.float64)
        if slope_l > 0.0:
            out = np.where(y_arr < v[0], nodes[0] + (y_arr - v[0]) / slope_l, out)
        if slope_r > 0.0:
            out = np.where(y_arr > v[-1], nodes[-1] + (y_arr - v[-1]) / slope_r, out)
        return out if isinstance(y, np.ndarray) else float(out)

    def derivative(self) -> np.ndarray:
        """Central-difference f'; one-sided at the extrapolation joints."""
        v, h = self.values, self.grid.h
        d = np.gradient(v, h)
        if self.extrap_lo is not None and self.extrap_lo < self.grid.n - 1:
            j = self.extrap_lo
            d[: j + 1] = (v[j + 1] - v[j]) / h
        if self.extrap_hi is not None and self.extrap_hi > 0:
            j = self.extrap_hi
            d[j:] = (v[j] - v[j - 1]) / h
        return d


def compose_quantile_cdf(target_quantile, flow_cdf: MonotoneCdf) -> FlowSlice:
    """Quantile matching: the slice x -> target_quantile(flow_cdf(x)).

    CDF values are clipped away from {0, 1} so unbounded target quantiles
    stay finite in the tails.
    """
    q = np.clip(flow_cdf.values, CDF_CLIP, 1.0 - CDF_CLIP)
    vals = np.asarray(target_quantile(q), dtype=np.float64)
    return FlowSlice(flow_cdf.grid, vals)
