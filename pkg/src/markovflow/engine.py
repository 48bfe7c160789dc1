"""Calibration orchestration: grid sizing, scheme dispatch, parallelism.

Grid policy (the x-range mapping is implementation-defined; these rules
are frozen against the double-exponential reference fixture):

* first period: half-width = max(flow coverage of +-y_max under the
  initial Brownian guess, 6.5 sqrt(T1));
* later periods: half-width = max(flow coverage, 10 sqrt(T_end)), wide
  enough that every iterate keeps boundary mass below the CDF tolerance;
* bass-chl and continuous chains share one grid sized from the largest
  marginal.

Periods with no sequential dependency (bass-chl, homogeneous) calibrate
concurrently; MARKOVFLOW_THREADS caps the pool.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .black import norm_ppf
from .brownian import bass_first_period, chl_fixed_point
from .config import RunConfig
from .continuous import calibrate_continuous_period
from .errors import InvalidInputError
from .grids import Grid, build_uniform_grid
from .homogeneous import ExtrapolationPolicy, calibrate_first_period, calibrate_period
from .marginals import Marginal, MarginalSet
from .surface import ModelSurface

FIRST_PERIOD_SAFETY = 6.5
LATER_PERIOD_SAFETY = 10.0


def max_threads() -> int:
    env = os.environ.get("MARKOVFLOW_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def flow_coverage_half_width(nu: Marginal, t_end: float, y_max: float) -> float:
    """x beyond which the initial-guess flow leaves [-y_max, y_max]."""
    q_hi = min(float(nu.cdf(y_max)), 1.0 - 1e-12)
    q_lo = max(float(nu.cdf(-y_max)), 1e-12)
    reach = max(norm_ppf(q_hi), -norm_ppf(q_lo), 0.0)
    return float(np.sqrt(t_end) * reach)


def period_grid(nu: Marginal, t_end: float, config: RunConfig, first: bool) -> Grid:
    safety = FIRST_PERIOD_SAFETY if first else LATER_PERIOD_SAFETY
    half = max(
        flow_coverage_half_width(nu, t_end, config.y_max),
        safety * np.sqrt(t_end),
    )
    return build_uniform_grid(config.n_x, -half, half)


def shared_grid(mset: MarginalSet, config: RunConfig) -> Grid:
    t_end = float(mset.maturities[-1])
    return period_grid(mset.marginals[-1], t_end, config, first=False)


def period_steps(t0: float, t1: float, config: RunConfig, horizon: float) -> int:
    return max(2, int(np.ceil(config.n_t * (t1 - t0) / horizon)))


def calibrate_surface(mset: MarginalSet, config: RunConfig) -> ModelSurface:
    """Calibrate every forward period under the configured scheme."""
    if config.scheme == "bass-chl":
        periods = _calibrate_bass_chl(mset, config)
    elif config.scheme == "homogeneous":
        periods = _calibrate_homogeneous(mset, config)
    elif config.scheme == "continuous":
        periods = _calibrate_continuous(mset, config)
    else:
        raise InvalidInputError(f"unknown scheme {config.scheme!r}")
    return ModelSurface(spot=mset.spot, periods=periods, scheme=config.scheme)


def _pool_map(jobs):
    """Run zero-argument jobs, preserving order; thread count from env."""
    workers = min(max_threads(), len(jobs))
    if workers <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


def _calibrate_bass_chl(mset: MarginalSet, config: RunConfig):
    grid = shared_grid(mset, config)
    t = mset.maturities
    jobs = [lambda: bass_first_period(mset.marginals[0], float(t[0]), grid)]
    for i in range(len(mset) - 1):
        jobs.append(
            lambda i=i: chl_fixed_point(
                mset.marginals[i], mset.marginals[i + 1],
                float(t[i]), float(t[i + 1]), grid,
                tol=config.tol_brownian, max_iter=config.max_iter,
            )
        )
    return _pool_map(jobs)


def _calibrate_homogeneous(mset: MarginalSet, config: RunConfig):
    t = mset.maturities
    horizon = float(t[-1])
    policy = ExtrapolationPolicy(y_max=config.y_max)

    def first():
        grid = period_grid(mset.marginals[0], float(t[0]), config, first=True)
        return calibrate_first_period(
            mset.marginals[0], float(t[0]), grid, policy,
            n_steps=period_steps(0.0, float(t[0]), config, horizon),
            tol=config.tol, max_iter=config.max_iter,
            mean_zero=config.mean_zero, mu_max=config.mu_max,
            scheme=config.fp_scheme,
        )

    jobs = [first]
    for i in range(len(mset) - 1):
        def later(i=i):
            grid = period_grid(mset.marginals[i + 1], float(t[i + 1]), config, first=False)
            return calibrate_period(
                mset.marginals[i], mset.marginals[i + 1],
                float(t[i]), float(t[i + 1]), grid, policy,
                n_steps=period_steps(float(t[i]), float(t[i + 1]), config, horizon),
                tol=config.tol, max_iter=config.max_iter,
                mean_zero=config.mean_zero, mu_max=config.mu_max,
                scheme=config.fp_scheme,
            )

        jobs.append(later)
    return _pool_map(jobs)


def _calibrate_continuous(mset: MarginalSet, config: RunConfig):
    t = mset.maturities
    horizon = float(t[-1])
    policy = ExtrapolationPolicy(y_max=config.y_max)
    grid = shared_grid(mset, config)
    first = calibrate_first_period(
        mset.marginals[0], float(t[0]), grid, policy,
        n_steps=period_steps(0.0, float(t[0]), config, horizon),
        tol=config.tol, max_iter=config.max_iter,
        mean_zero=config.mean_zero, mu_max=config.mu_max,
        scheme=config.fp_scheme,
    )
    periods = [first]
    prev_F, prev_f = first.F_end, first.flow
    for i in range(len(mset) - 1):
        per = calibrate_continuous_period(
            prev_F, prev_f, mset.marginals[i + 1],
            float(t[i]), float(t[i + 1]), grid, policy,
            n_steps=period_steps(float(t[i]), float(t[i + 1]), config, horizon),
            rule_kind=config.rule, tol=config.tol, max_iter=config.max_iter,
            mu_max=config.mu_max, scheme=config.fp_scheme,
        )
        periods.append(per)
        prev_F, prev_f = per.F_end, per.f_end
    return periods
