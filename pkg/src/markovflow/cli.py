"""Command-line surface: fixture generation, skew fitting, calibration,
surface export, simulation, and convergence reporting.

Exit codes: 0 success, 2 validation failure (arbitrage / convex order),
3 convergence failure (partial outputs are still written), 4 I/O or
parse failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .config import RULES, SCHEMES, RunConfig
from .engine import calibrate_surface
from .errors import ConvergenceError, ConvexOrderError, InvalidInputError, MarkovFlowError
from .homogeneous import convergence_rate
from .marginals import (
    DoubleExponentialMarginal,
    MarginalSet,
    check_convex_order,
    marginal_set_from_json,
    marginal_set_to_json,
)
from .skewfit import QuoteSlice, fit_sequence
from .surface import (
    export_surface,
    simulate,
    surface_from_json,
    surface_to_json,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_IO = 4


def _header_lines(config: RunConfig | None) -> list[str]:
    meta = f"markovflow {__version__}"
    if config is not None:
        meta += f" config={config.digest()}"
    return [meta]


def _meta(config: RunConfig | None) -> dict:
    out = {"engine": "markovflow", "version": __version__}
    if config is not None:
        out["config"] = config.digest()
    return out


def _parse_t_list(text: str) -> np.ndarray:
    try:
        ts = np.array([float(x) for x in text.split(",") if x.strip()])
    except ValueError as exc:
        raise InvalidInputError(f"bad maturity list {text!r}: {exc}") from exc
    if ts.size == 0 or np.any(np.diff(ts) <= 0) or ts[0] <= 0:
        raise InvalidInputError(
            f"maturities must be positive and strictly increasing, got {text!r}"
        )
    return ts


def cmd_synth_de(args) -> int:
    """Write the double-exponential marginal-set fixture."""
    ts = _parse_t_list(args.t_list)
    if args.lambda_rule != "inv-sqrt":
        raise InvalidInputError(f"unsupported lambda rule {args.lambda_rule!r}")
    mset = MarginalSet(ts, [DoubleExponentialMarginal(float(t)) for t in ts], spot=0.0)
    with open(args.out, "w") as fh:
        fh.write(marginal_set_to_json(mset, meta=_meta(None)))
    print(f"wrote {len(mset)} double-exponential marginals to {args.out}")
    return EXIT_OK


def _read_quotes_csv(path: str) -> list[QuoteSlice]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(
            line for line in fh if not line.lstrip().startswith("#")
        )
        required = {"maturity_days", "strike", "implied_vol", "forward"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise InvalidInputError(
                f"quotes CSV must have columns {sorted(required)}, "
                f"got {reader.fieldnames}"
            )
        for row in reader:
            rows.append((
                float(row["maturity_days"]) / 365.0,
                float(row["strike"]) / float(row["forward"]),
                float(row["implied_vol"]),
            ))
    if not rows:
        raise InvalidInputError("quotes CSV contains no data rows")
    from .black import black_call

    slices: dict[float, list[tuple[float, float]]] = {}
    for expiry, k, vol in rows:
        price = float(black_call(1.0, vol, expiry, k))
        slices.setdefault(expiry, []).append((k, price))
    out = []
    for expiry in sorted(slices):
        data = sorted(slices[expiry])
        ks = np.array([d[0] for d in data])
        ps = np.array([d[1] for d in data])
        out.append(QuoteSlice(expiry, ks, ps))
    return out


def cmd_fit_skews(args) -> int:
    """Fit quote slices into an arbitrage-free marginal set."""
    slices = _read_quotes_csv(args.quotes)
    mset, reports = fit_sequence(
        slices, forward=1.0, n_modes=args.modes,
        n_restarts=args.restarts, seed=args.seed,
    )
    with open(args.out, "w") as fh:
        fh.write(marginal_set_to_json(mset, meta=_meta(None)))
    if args.report:
        with open(args.report, "w", newline="") as fh:
            fh.write(f"# markovflow {__version__}\n")
            w = csv.writer(fh)
            w.writerow(["maturity", "rms_vs_quotes", "objective", "converged",
                        "floors_calendar", "floors_butterfly", "theta_capped"])
            for r in reports:
                w.writerow([r.maturity, f"{r.rms_vs_quotes:.6e}",
                            f"{r.objective:.6e}", int(r.optimizer_converged),
                            r.floors_calendar, r.floors_butterfly, r.theta_capped])
    # the projected chain is arbitrage-free by construction (hard check);
    # the mixed-lognormal re-fits may wiggle at fitting-noise scale
    proj_worst = 0.0
    for prev, cur in zip(reports, reports[1:]):
        gap = cur.projected.calls - prev.projected.calls
        proj_worst = max(proj_worst, float(-gap.min()))
    strikes = np.geomspace(0.25, 4.0, 80)
    report = check_convex_order(mset, strikes, tol=1e-5)
    print(f"fitted {len(mset)} slices; projected-chain worst gap {proj_worst:.2e}; "
          f"marginal convex-order violations: {len(report.violations)}")
    if proj_worst > 1e-10 or report.violations:
        return EXIT_VALIDATION
    return EXIT_OK


def _config_from_args(args) -> RunConfig:
    return RunConfig(
        n_t=args.grid_nt, n_x=args.grid_nx, y_max=args.ymax, tol=args.tol,
        max_iter=args.max_iter, scheme=args.scheme, rule=args.rule,
        seed=args.seed, paths=args.paths, steps_per_period=args.steps_per_period,
        window_lo=args.window_lo, window_hi=args.window_hi,
    )


def _residual_rows(surface) -> list[tuple]:
    rows = []
    for i, p in enumerate(surface.periods):
        if p.kind == "brownian":
            history = getattr(p, "iteration_log", [])
            for n, r in enumerate(history, start=1):
                rows.append((i, n, r, "", ""))
        else:
            f_res = p.f_residuals
            mu_res = getattr(p, "mu_residuals", [])
            F_res = getattr(p, "F_residuals", [])
            for n in range(len(f_res)):
                rows.append((
                    i, n + 1, f_res[n],
                    mu_res[n] if n < len(mu_res) else "",
                    F_res[n] if n < len(F_res) else "",
                ))
    return rows


def _period_accepted(p, tol: float) -> bool:
    if getattr(p, "converged", True):
        return True
    hist = p.f_residuals if hasattr(p, "f_residuals") else p.iteration_log
    if not hist:
        return True
    return hist[-1] <= max(100.0 * tol, 1e-4)


def cmd_calibrate(args) -> int:
    with open(args.marginals) as fh:
        mset = marginal_set_from_json(fh.read())
    config = _config_from_args(args)

    if len(mset) >= 2:
        lo = min(m.quantile(0.001) for m in mset.marginals)
        hi = max(m.quantile(0.999) for m in mset.marginals)
        strikes = np.linspace(lo, hi, 101)
        report = check_convex_order(mset, strikes, tol=1e-9)
        if not report.ok:
            print(f"marginals violate convex order at {len(report.violations)} "
                  f"strikes (max {report.max_violation:.3e})", file=sys.stderr)
            return EXIT_VALIDATION

    try:
        surface = calibrate_surface(mset, config)
    except (ConvexOrderError,) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE

    with open(args.out, "w") as fh:
        fh.write(surface_to_json(surface, meta=_meta(config)))

    logs_dir = args.logs_dir or os.path.dirname(os.path.abspath(args.out))
    os.makedirs(logs_dir, exist_ok=True)
    log_path = os.path.join(logs_dir, "iterations.csv")
    with open(log_path, "w", newline="") as fh:
        for line in _header_lines(config):
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["period", "iteration", "f_residual", "mu_residual", "F_residual"])
        w.writerows(_residual_rows(surface))

    rate_path = os.path.join(logs_dir, "rates.csv")
    with open(rate_path, "w", newline="") as fh:
        for line in _header_lines(config):
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["period", "t_start", "t_end", "window_lo", "window_hi",
                    "rate", "converged"])
        for i, p in enumerate(surface.periods):
            lo, hi = config.rate_window(i)
            hist = p.f_residuals if hasattr(p, "f_residuals") else p.iteration_log
            try:
                rate = f"{convergence_rate(hist, lo, hi):.6f}"
            except (InvalidInputError, ValueError):
                rate = ""
            w.writerow([i, p.t_start, p.t_end, lo, hi, rate,
                        int(getattr(p, "converged", True))])

    print(f"calibrated {len(surface.periods)} periods ({config.scheme}); "
          f"model -> {args.out}, logs -> {logs_dir}")
    if not all(_period_accepted(p, config.tol) for p in surface.periods):
        print("one or more periods failed to converge", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def _parse_grid_arg(text: str, fallback: np.ndarray) -> np.ndarray:
    if not text:
        return fallback
    parts = [float(x) for x in text.split(",") if x.strip()]
    return np.array(parts)


def cmd_export(args) -> int:
    with open(args.model) as fh:
        surface = surface_from_json(fh.read())
    config = None
    t_grid = _parse_grid_arg(
        args.t_grid,
        np.linspace(surface.horizon / 120.0, surface.horizon, 60),
    )
    y_values = _parse_grid_arg(args.y_values, np.array([0.0, 1.0, 2.0, 3.0]))

    if args.surface_out:
        y_lo = min(float(np.min(p.flow_at(p.t_end).values)) for p in surface.periods)
        y_hi = max(float(np.max(p.flow_at(p.t_end).values)) for p in surface.periods)
        y_grid = _parse_grid_arg(args.y_grid, np.linspace(max(y_lo, -10), min(y_hi, 10), 81))
        table = export_surface(surface, t_grid, y_grid)
        table.to_csv(args.surface_out, _header_lines(config))
        print(f"surface table -> {args.surface_out}")
    if args.term_out:
        table = export_surface(surface, t_grid, y_values)
        table.to_csv(args.term_out, _header_lines(config))
        print(f"term-structure table -> {args.term_out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    with open(args.model) as fh:
        surface = surface_from_json(fh.read())
    targets = None
    if args.marginals:
        with open(args.marginals) as fh:
            targets = marginal_set_from_json(fh.read())
    paths = simulate(surface, n_paths=args.paths,
                     steps_per_period=args.steps_per_period, seed=args.seed)
    summary = paths.summary(targets)
    summary["meta"] = _meta(None)
    with open(args.out, "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"simulated {args.paths} paths -> {args.out} "
          f"(clamped stitches: {paths.n_clamped})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="markovflow",
        description="Local-volatility calibration by Markov-functional flows",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-de", help="write the double-exponential fixture")
    p.add_argument("--t-list", default="0.1,1,2,3")
    p.add_argument("--lambda-rule", default="inv-sqrt", choices=["inv-sqrt"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_de)

    p = sub.add_parser("fit-skews", help="fit quotes into arbitrage-free marginals")
    p.add_argument("quotes", help="CSV: maturity_days,strike,implied_vol,forward")
    p.add_argument("--modes", type=int, default=4)
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default="")
    p.set_defaults(func=cmd_fit_skews)

    p = sub.add_parser("calibrate", help="calibrate a model surface to marginals")
    p.add_argument("marginals", help="marginal-set JSON file")
    p.add_argument("--scheme", default="homogeneous", choices=list(SCHEMES))
    p.add_argument("--grid-nt", type=int, default=100)
    p.add_argument("--grid-nx", type=int, default=500)
    p.add_argument("--ymax", type=float, default=7.0)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--rule", default="inverse-sqrt", choices=list(RULES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paths", type=int, default=100_000)
    p.add_argument("--steps-per-period", type=int, default=32)
    p.add_argument("--window-lo", type=int, default=None)
    p.add_argument("--window-hi", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--logs-dir", default="")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("export", help="export local-vol surface and term structure")
    p.add_argument("model", help="model JSON file")
    p.add_argument("--t-grid", default="")
    p.add_argument("--y-grid", default="")
    p.add_argument("--y-values", default="0,1,2,3")
    p.add_argument("--surface-out", default="")
    p.add_argument("--term-out", default="")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("simulate", help="Monte-Carlo simulate a calibrated model")
    p.add_argument("model", help="model JSON file")
    p.add_argument("--paths", type=int, default=100_000)
    p.add_argument("--steps-per-period", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--marginals", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename}", file=sys.stderr)
        return EXIT_IO
    except (InvalidInputError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConvexOrderError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except MarkovFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
