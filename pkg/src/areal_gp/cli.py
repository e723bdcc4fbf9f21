"""Command-line entry point: ``areal-gp <stage> --config <path> [overrides]``.

Exit codes: 0 success, 1 validation or usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import RunConfig
from .errors import ArealGPError, NumericalError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2

STAGES = {
    "simulate": pipeline.run_simulate,
    "calibrate": pipeline.run_calibrate,
    "fit": pipeline.run_fit,
    "forecast": pipeline.run_forecast,
    "score": pipeline.run_score,
    "diagnose": pipeline.run_diagnose,
    "report": pipeline.run_report,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage, which would collide with the
    # numerical-failure code.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default="lattice",
                        help="RunConfig JSON path, or a bundled config name (benchmark, lattice)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--workers", type=int, help="threads for per-region updates")
    common.add_argument("--n-iter", type=int, dest="n_iter")
    common.add_argument("--burn-in", type=int, dest="burn_in")
    common.add_argument("--thin", type=int)
    common.add_argument("--rho-car-mode", choices=("fixed", "sampled"), dest="rho_car_mode")
    common.add_argument("--split-time", type=int, dest="split_time")
    common.add_argument("--horizon", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="areal-gp", description="Spatially correlated GP models for areal time series.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "simulate": "draw a synthetic lattice panel with known truth",
        "calibrate": "per-region ML fits and data-driven priors",
        "fit": "run the MCMC sampler",
        "forecast": "posterior-predictive draws over the horizon",
        "score": "RMSE, MAE, CRPS and ECP on the training and test sets",
        "diagnose": "Geweke, ACF, ESS and acceptance-rate diagnostics",
        "report": "per-region series plots, CRPS summaries and the ECP table",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    return cfg.with_overrides(**{
        "seed": args.seed,
        "output_dir": args.out,
        "split_time": args.split_time,
        "mcmc.workers": args.workers,
        "mcmc.n_iter": args.n_iter,
        "mcmc.burn_in": args.burn_in,
        "mcmc.thin": args.thin,
        "mcmc.rho_car_mode": args.rho_car_mode,
        "forecast.horizon": args.horizon,
    })


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _apply_overrides(RunConfig.load(args.config), args)
        STAGES[args.command](cfg)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, ArealGPError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
