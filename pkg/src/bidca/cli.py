"""Command line: ``bidca solve``, ``bidca grid`` and ``bidca verify``.

Exit codes: 0 success, 1 a run did not converge or a check failed,
2 bad configuration or unreadable data.  ``BIDCA_LOG`` sets the log level
(``DEBUG``, ``INFO``, ``WARNING``; default ``WARNING``).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import experiment, verify
from .dca import CRITERIA, STOPPING, VARIANTS
from .data import write_results
from .errors import ConfigError, DataError

EXIT_OK, EXIT_NONCONVERGED, EXIT_CONFIG = 0, 1, 2


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"3"``, ``"0,4,7"`` or ``"0-19"``."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    return tuple(seeds)


def _add_experiment_flags(sp: argparse.ArgumentParser) -> None:
    d = experiment.ExperimentConfig
    sp.add_argument("--model", default="svm-cv", help="svm-cv, lasso-cv or toy:<clamp|quadratic|lasso>")
    sp.add_argument("--data", help="LIBSVM file (not needed for toys)")
    sp.add_argument("--folds", type=int, default=d.folds, help="cross-validation folds T")
    sp.add_argument("--epsilon", type=float, default=d.epsilon, help="value-function relaxation")
    sp.add_argument("--tol", type=float, default=d.tol)
    sp.add_argument("--algo", choices=VARIANTS, default=d.algo)
    sp.add_argument("--criterion", choices=CRITERIA, default=d.criterion,
                    help="inexactness rule for the subproblem solves")
    sp.add_argument("--seeds", type=parse_seeds, help="seed list, e.g. 0,3,5 or 0-19")
    sp.add_argument("--reps", type=int, help="repetitions with seeds 0..reps-1 (ignored with --seeds)")
    sp.add_argument("--beta0", type=float, default=d.beta0)
    sp.add_argument("--delta-beta", type=float, default=d.delta_beta)
    sp.add_argument("--rho", type=float, default=d.rho)
    sp.add_argument("--sigma", type=float, default=d.sigma)
    sp.add_argument("--zeta0", type=float, default=d.zeta0)
    sp.add_argument("--max-iter", type=int, default=d.max_iter)
    sp.add_argument("--beta-max", type=float, default=d.beta_max)
    sp.add_argument("--stopping", choices=STOPPING,
                    help="default: paper for svm-cv, algorithm otherwise")
    sp.add_argument("--n-train", type=int, help="training-set size (default from the dataset name)")
    sp.add_argument("--jobs", type=int, default=1, help="repetitions solved in parallel")
    sp.add_argument("--debug", action="store_true", help="assert sufficient decrease every iteration")
    sp.add_argument("--out", help="results file (JSON lines); stdout when omitted")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bidca", description="DC algorithms for bilevel hyperparameter selection")
    sub = ap.add_subparsers(dest="command", required=True)
    solve = sub.add_parser("solve", help="run the DC algorithm for each seed")
    _add_experiment_flags(solve)
    grid = sub.add_parser("grid", help="grid-search baseline")
    _add_experiment_flags(grid)
    grid.add_argument("--lambdas", default="1e-4:1e4:9", help="lo:hi:count log grid or a single value")
    grid.add_argument("--wbars", default="1.5", help="comma list of scalar wbar values (svm-cv)")
    ver = sub.add_parser("verify", help="run the invariant suites")
    ver.add_argument("--scope", choices=verify.SCOPES, default="fast")
    ver.add_argument("--plant-fault", action="store_true", help="double value-function subgradients")
    return ap


def config_from_args(args) -> experiment.ExperimentConfig:
    if args.seeds is not None:
        seeds = args.seeds
    elif args.reps is not None:
        if args.reps < 1:
            raise ConfigError("reps must be positive")
        seeds = tuple(range(args.reps))
    else:
        seeds = (0,)
    return experiment.ExperimentConfig(
        model=args.model, data=args.data, folds=args.folds, epsilon=args.epsilon, tol=args.tol,
        algo=args.algo, criterion=args.criterion, seeds=seeds, beta0=args.beta0,
        delta_beta=args.delta_beta, rho=args.rho, sigma=args.sigma, zeta0=args.zeta0,
        max_iter=args.max_iter, beta_max=args.beta_max, stopping=args.stopping,
        n_train=args.n_train, jobs=args.jobs, debug=args.debug, out=args.out)


def grid_from_args(args) -> experiment.GridSpec:
    lo, hi, count = experiment.parse_range(args.lambdas)
    try:
        wbars = tuple(float(v) for v in args.wbars.split(","))
    except ValueError:
        raise ConfigError(f"bad --wbars {args.wbars!r}") from None
    return experiment.GridSpec.log_spaced(lo, hi, count, wbars)


def _emit(records, out) -> int:
    footer = write_results(records, out, None if out else sys.stdout)
    if out:
        print(f"{footer['runs']} runs, {footer['completed']} with results, "
              f"status {footer['status_counts']} -> {out}", file=sys.stderr)
    return EXIT_OK if all(r["status"] == "converged" for r in records) else EXIT_NONCONVERGED


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("BIDCA_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            results = verify.run_suite(args.scope, args.plant_fault)
            print(verify.format_report(results))
            return EXIT_OK if all(r.passed for r in results) else EXIT_NONCONVERGED
        cfg = config_from_args(args)
        if args.command == "solve":
            return _emit(experiment.cmd_solve(cfg), cfg.out)
        return _emit(experiment.cmd_grid(cfg, grid_from_args(args)), cfg.out)
    except (ConfigError, DataError) as exc:
        print(f"bidca: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"bidca: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
