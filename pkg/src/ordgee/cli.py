"""Command-line interface: ``ordgee fit`` and ``ordgee simulate``.

Exit codes: 0 success, 2 invalid input or options, 3 fit did not converge.
"""

from __future__ import annotations

import argparse
import os
import secrets
import sys
from pathlib import Path

import numpy as np

from .association import AssociationSpec
from .estimators import METHODS, fit
from .exceptions import MalformedDataError, NonConvergenceError, OrdGEEError
from .missingness import ModelConfig, fit_missingness_models
from .panel import read_panel_csv
from .simulation import Scenario, run_study

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NONCONVERGENCE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _unit_float(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ordgee", description="Marginal models for incomplete longitudinal ordinal data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--out", type=Path, help="write the JSON result here")
    common.add_argument("--seed", type=int, help="random seed (printed when omitted)")
    common.add_argument("--jobs", type=_positive_int, default=None, help="worker processes")
    common.add_argument("--omega", type=_unit_float, help="blend weight of the DR correlation estimator")
    common.add_argument("--imputations", type=int, help="number of imputations for migee")
    common.add_argument("--mc-draws", type=int, help="Monte Carlo draws for large completion sets")
    common.add_argument("--weight-floor", type=float, help="lower bound for observation probabilities")

    pf = sub.add_parser("fit", parents=[common], help="fit a model to a CSV panel")
    pf.add_argument("--data", type=Path, required=True, help="long-format CSV (subject,time,response,x,z1..)")
    pf.add_argument("--method", choices=METHODS, default="gee")
    pf.add_argument("--assoc", default="corr:ind", help="family:structure, e.g. corr:exch or lor:uniform")
    pf.add_argument("--model-config", type=Path, help="JSON predictor lists for the nuisance models")
    pf.add_argument("--levels", type=int, help="number of response categories (default: max observed)")

    ps = sub.add_parser("simulate", parents=[common], help="run a Monte Carlo study")
    ps.add_argument("--scenario", default="paper-table2", help="paper-table1, paper-table2 or paper-n50")
    ps.add_argument("--n", type=int, help="subjects per replication")
    ps.add_argument("--reps", type=int, help="converged replications per structure")
    ps.add_argument("--assoc", action="append", help="structure to include (repeatable)")
    ps.add_argument("--method", action="append", help="method label, e.g. 'DRGEE(x+,r-)' (repeatable)")
    return parser


def _config(args, base: ModelConfig) -> ModelConfig:
    changes = {}
    for key, attr in (("omega", "omega"), ("imputations", "imputations"), ("mc_draws", "mc_draws"),
                      ("weight_floor", "weight_floor")):
        v = getattr(args, key, None)
        if v is not None:
            changes[attr] = v
    data = base.to_dict()
    data.update(changes)
    return ModelConfig.from_dict(data)


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    seed = secrets.randbits(32)
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def cmd_fit(args) -> int:
    try:
        spec = AssociationSpec.parse(args.assoc)
        if args.method in ("wgee", "drgee") and args.model_config is None:
            raise ValueError(f"--model-config is required for --method {args.method}")
        base = ModelConfig.from_json(args.model_config) if args.model_config else ModelConfig()
        cfg = _config(args, base)
        panel = read_panel_csv(args.data, J=args.levels)
    except (OSError, ValueError, MalformedDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rng = np.random.default_rng(_seed(args))
    try:
        models = None
        if args.method in ("wgee", "drgee"):
            models = fit_missingness_models(panel, cfg, need_predictive=args.method == "drgee")
        res = fit(panel, args.method, spec, models=models, config=cfg, rng=rng, strict=True)
    except NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.result is not None:
            print(exc.result.to_json(indent=2), file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (OrdGEEError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"{args.method.upper()} with {spec} association, n = {panel.n}, "
          f"iterations = {res.iterations}")
    print(res.table())
    if args.out:
        args.out.write_text(res.to_json(indent=2) + "\n")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        if args.reps is not None and args.reps < 1:
            raise ValueError("--reps must be positive")
        if args.n is not None and args.n < 2:
            raise ValueError("--n must be at least 2")
        cfg = _config(args, ModelConfig())
        overrides = dict(n=args.n, reps=args.reps, omega=cfg.omega, imputations=cfg.imputations,
                         mc_draws=cfg.mc_draws, weight_floor=cfg.weight_floor)
        if args.assoc:
            overrides["structures"] = tuple(args.assoc)
        if args.method:
            overrides["methods"] = tuple(args.method)
        overrides["seed"] = _seed(args)
        scenario = Scenario.preset(args.scenario, **overrides)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    jobs = args.jobs or os.cpu_count() or 1
    report = run_study(scenario, jobs=jobs)
    print(report.table())
    for s, info in report.structures.items():
        if info["status"] != "ok":
            print(f"note: {s} {info['status']} (convergence rate {info['convergence_rate']:.2f})")
    if args.out:
        args.out.write_text(report.to_json() + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "fit":
        return cmd_fit(args)
    return cmd_simulate(args)


if __name__ == "__main__":
    sys.exit(main())
