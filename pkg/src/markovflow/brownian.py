"""Brownian forward periods: Bass first period and the CHL fixed point.

Both constructions ride a driftless Brownian flow variable, so every
propagation is a Gaussian convolution.  Convolutions are evaluated by FFT
after extending the slice linearly beyond the grid and splitting off an
affine component, which leaves a decaying residual safe to zero-pad.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import next_fast_len

from .black import norm_cdf
from .errors import ConvergenceError, ConvexOrderError, InvalidInputError
from .grids import CDF_CLIP, FlowSlice, Grid, MonotoneCdf, compose_quantile_cdf
from .marginals import Marginal

# Kernel support and linear extension reach, in units of sqrt(tau).  Gaussian
# mass beyond 8 sigma is ~1e-15, far below every tolerance in the package.
_PAD_SIGMAS = 8.0


class HeatKernelOp:
    """Gaussian convolution operator of variance tau on a fixed grid."""

    def __init__(self, grid: Grid, tau: float):
        if tau <= 0.0:
            raise InvalidInputError(f"kernel variance must be positive, got {tau}")
        self.grid = grid
        self.tau = float(tau)
        h = grid.h
        self.pad = int(np.ceil(_PAD_SIGMAS * np.sqrt(tau) / h)) + 2
        offsets = np.arange(-self.pad, self.pad + 1) * h
        kernel = np.exp(-0.5 * offsets**2 / tau)
        self.kernel = kernel / kernel.sum()
        # linear convolution length, rounded up for the FFT
        self.n_ext = grid.n + 2 * self.pad
        self.fft_len = next_fast_len(self.n_ext + self.kernel.size - 1)
        self._kernel_hat = np.fft.rfft(self.kernel, self.fft_len)

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Convolve grid samples with the kernel; returns interior values."""
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (self.grid.n,):
            raise InvalidInputError("values shape does not match grid")
        h, m = self.grid.h, self.pad
        slope_l = (v[1] - v[0]) / h
        slope_r = (v[-1] - v[-2]) / h
        left = v[0] + slope_l * h * np.arange(-m, 0)
        right = v[-1] + slope_r * h * np.arange(1, m + 1)
        ext = np.concatenate((left, v, right))
        # affine split: the kernel maps a + b*x to itself, and the residual
        # vanishes at both extension ends, so zero padding is harmless
        x_ext = np.arange(self.n_ext, dtype=np.float64)
        slope = (ext[-1] - ext[0]) / (self.n_ext - 1)
        affine = ext[0] + slope * x_ext
        resid = ext - affine
        conv = np.fft.irfft(np.fft.rfft(resid, self.fft_len) * self._kernel_hat,
                            self.fft_len)
        # 'same' alignment: kernel center sits at index pad
        out = conv[2 * m: 2 * m + self.grid.n]
        return out + affine[m: m + self.grid.n]


def heat_convolve(values: np.ndarray, grid: Grid, tau: float) -> np.ndarray:
    """One-shot Gaussian convolution; tau = 0 passes values through."""
    if tau < 0.0:
        raise InvalidInputError(f"kernel variance must be >= 0, got {tau}")
    if tau == 0.0:
        return np.array(values, dtype=np.float64, copy=True)
    return HeatKernelOp(grid, tau).apply(values)


def brownian_cdf(grid: Grid, t: float, mean: float = 0.0) -> MonotoneCdf:
    """CDF of N(mean, t) sampled on the grid."""
    if t <= 0.0:
        raise InvalidInputError(f"time must be positive, got {t}")
    return MonotoneCdf(grid, norm_cdf((grid.nodes - mean) / np.sqrt(t)))


def point_mass_cdf(grid: Grid, x0: float = 0.0) -> MonotoneCdf:
    """Heaviside CDF of a point mass at x0."""
    return MonotoneCdf(grid, (grid.nodes >= x0).astype(np.float64))


@dataclass
class BrownianPeriod:
    """One forward period with Brownian flow-variable dynamics.

    ``start_point`` is set (to 0) for the first period, where the flow
    variable starts from an exact point mass rather than a distribution.
    """

    t_start: float
    t_end: float
    grid: Grid
    F_start: MonotoneCdf
    terminal_flow: FlowSlice
    iteration_log: list[float] = field(default_factory=list)
    converged: bool = True
    start_point: float | None = None

    kind = "brownian"

    def flow_at(self, t: float) -> FlowSlice:
        return brownian_flow_at(self, t)

    def end_cdf(self) -> MonotoneCdf:
        """Law of the flow variable at t_end."""
        if self.start_point is not None:
            return brownian_cdf(self.grid, self.t_end - self.t_start, self.start_point)
        vals = heat_convolve(self.F_start.values, self.grid, self.t_end - self.t_start)
        return MonotoneCdf(self.grid, np.clip(vals, 0.0, 1.0))


def brownian_flow_at(period: BrownianPeriod, t: float) -> FlowSlice:
    """Flow slice at any time inside the period, by kernel quadrature."""
    if not period.t_start <= t <= period.t_end:
        raise InvalidInputError(
            f"t={t} outside period [{period.t_start}, {period.t_end}]"
        )
    tau = period.t_end - t
    if tau == 0.0:
        return period.terminal_flow
    vals = heat_convolve(period.terminal_flow.values, period.grid, tau)
    return FlowSlice(period.grid, vals)


def bass_first_period(nu1: Marginal, t1: float, grid: Grid) -> BrownianPeriod:
    """First-period construction: compose the target quantile with N(0, t1).

    The flow variable is a standard Brownian motion from X_0 = 0, so the
    terminal flow is exact and interior slices follow by convolution.
    """
    if t1 <= 0.0:
        raise InvalidInputError(f"first maturity must be positive, got {t1}")
    flow = compose_quantile_cdf(nu1.quantile, brownian_cdf(grid, t1))
    if flow.values[-1] - flow.values[0] <= 0.0:
        raise InvalidInputError("degenerate marginal: flat terminal flow")
    return BrownianPeriod(
        t_start=0.0,
        t_end=t1,
        grid=grid,
        F_start=point_mass_cdf(grid),
        terminal_flow=flow,
        start_point=0.0,
    )


def _quick_convex_order_check(nu_lo: Marginal, nu_hi: Marginal) -> None:
    lo, hi = nu_lo.quantile(0.005), nu_lo.quantile(0.995)
    strikes = np.linspace(lo, hi, 33)
    gap = np.asarray(nu_hi.call(strikes)) - np.asarray(nu_lo.call(strikes))
    if gap.min() < -1e-9:
        raise ConvexOrderError(
            f"marginals out of convex order: worst gap {gap.min():.3e}"
        )


def chl_fixed_point(
    nu_i: Marginal,
    nu_ip1: Marginal,
    t_i: float,
    t_ip1: float,
    grid: Grid,
    tol: float = 1e-9,
    max_iter: int = 500,
) -> BrownianPeriod:
    """Determine the law of the period-start flow variable by fixed point.

    Iterates
        F  ->  F_{nu_i} o K_tau * Q_{nu_{i+1}} o K_tau * F
    from F = N(0, t_i) until the sup-norm successive difference drops
    below tol.  The terminal flow is the quantile match at t_{i+1}.
    """
    if not 0.0 < t_i < t_ip1:
        raise InvalidInputError(f"need 0 < t_i < t_ip1, got {t_i}, {t_ip1}")
    _quick_convex_order_check(nu_i, nu_ip1)

    op = HeatKernelOp(grid, t_ip1 - t_i)
    F = brownian_cdf(grid, t_i)
    log: list[float] = []
    for _ in range(max_iter):
        fwd = np.clip(op.apply(F.values), CDF_CLIP, 1.0 - CDF_CLIP)
        payoff = np.asarray(nu_ip1.quantile(fwd), dtype=np.float64)
        priced = op.apply(payoff)
        new_vals = np.clip(np.asarray(nu_i.cdf(priced), dtype=np.float64), 0.0, 1.0)
        resid = float(np.max(np.abs(new_vals - F.values)))
        log.append(resid)
        F = MonotoneCdf(grid, new_vals)
        if resid < tol:
            break
    converged = bool(log and log[-1] < tol)
    if not converged and (not np.isfinite(log[-1]) or log[-1] >= log[0]):
        raise ConvergenceError(
            f"CHL iteration stagnated: residual {log[-1]:.3e} after {len(log)} steps"
        )

    fwd = np.clip(op.apply(F.values), CDF_CLIP, 1.0 - CDF_CLIP)
    terminal = FlowSlice(grid, np.asarray(nu_ip1.quantile(fwd), dtype=np.float64))
    return BrownianPeriod(
        t_start=t_i,
        t_end=t_ip1,
        grid=grid,
        F_start=F,
        terminal_flow=terminal,
        iteration_log=log,
        converged=converged,
    )
