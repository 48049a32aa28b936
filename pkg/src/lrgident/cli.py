"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .harness import (
    ConfigError,
    PipelineError,
    RunConfig,
    parse_sigma_list,
    report_from_data,
    run_mc,
    sweep,
)
from .maxent import ArModel, MaxentConvergenceError
from .simgen import SimRecord, read_series_csv, simulate
from .spectral import (
    DIAGNOSTIC_GRID_SIZE,
    FrequencyGrid,
    ar_spectrum,
    dpl_diagnostic,
    export_spectrum_csv,
)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=str) + "\n")


def cmd_simulate(args) -> int:
    cfg = RunConfig.load(args.config)
    system = cfg.build_system()
    rec = simulate(system, cfg.N if args.N is None else args.N, args.seed, cfg.burn_in)
    rec.write_csv(args.out, "zeta")
    if args.truth_out:
        rec.write_csv(args.truth_out, "y")
    return 0


def cmd_estimate(args) -> int:
    cfg = RunConfig.load(args.config)
    zeta = read_series_csv(args.data)
    truth = None
    if args.truth:
        y = read_series_csv(args.truth)
        if y.shape != zeta.shape:
            raise ConfigError("truth and data series have different shapes")
        m = cfg.build_system().m
        truth = SimRecord(y[:, m:], y[:, :m], zeta - y, seed=-1, burn_in=0, sigma=cfg.sigma)
    rep = report_from_data(cfg, zeta, truth, seed=None, baseline=args.baseline)
    _write_json(args.report, rep.to_dict())
    if args.spectrum_out:
        grid = FrequencyGrid.uniform(DIAGNOSTIC_GRID_SIZE)
        export_spectrum_csv(args.spectrum_out, grid, ar_spectrum(ArModel(rep.P_hat), grid))
    return 0


def cmd_mc(args) -> int:
    cfg = RunConfig.load(args.config)
    rep = run_mc(cfg, args.trials, baseline=not args.no_baseline)
    rep.write_csv(args.out)
    _write_json(args.report, rep.to_dict())
    return 0


def cmd_sweep(args) -> int:
    cfg = RunConfig.load(args.config)
    sigmas = parse_sigma_list(args.sigma)
    try:
        Ns = [int(v) for v in args.N.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad N list: {exc}") from exc
    sweep(cfg, sigmas, Ns, args.trials, out_csv=args.out)
    return 0


def cmd_diag(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.which != "dpl":
        raise ConfigError(f"unknown diagnostic {args.which!r}")
    rep = dpl_diagnostic(cfg.build_system(), FrequencyGrid.uniform(args.grid))
    _write_json(args.out, rep.to_dict())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lrgident", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a measured series")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--N", type=int)
    s.add_argument("--truth-out", help="also write the noise-free series here")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", help="run the estimation pipeline on a series CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--truth", help="noise-free series CSV for the fit metrics")
    s.add_argument("--no-baseline", dest="baseline", action="store_false")
    s.add_argument("--spectrum-out", help="write the estimated latent spectrum and coherence here")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("mc", help="Monte-Carlo evaluation")
    s.add_argument("--config", required=True)
    s.add_argument("--trials", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--no-baseline", action="store_true")
    s.set_defaults(func=cmd_mc)

    s = sub.add_parser("sweep", help="sigma x N sensitivity grid")
    s.add_argument("--config", required=True)
    s.add_argument("--sigma", required=True, help="comma list or a:b:log:k")
    s.add_argument("--N", required=True, help="comma list")
    s.add_argument("--trials", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("diag", help="structural diagnostics")
    s.add_argument("which", choices=["dpl"])
    s.add_argument("--config", required=True)
    s.add_argument("--grid", type=int, default=512)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_diag)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PipelineError, MaxentConvergenceError, np.linalg.LinAlgError,
            ArithmeticError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
