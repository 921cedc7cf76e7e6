"""Command line entry point.

::

    sptransduct run CONFIG [--seed N] [--out DIR] [--jobs N]
    sptransduct report TABLE.csv --baseline NAME [--json]
    sptransduct validate CONFIG

Exit codes: 0 success, 2 configuration error (a JSON error object is
written to stderr), 3 more than 1% of replicates of some cell failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .estimators import ConfigError
from .experiments import ResultTable, compare_report, load_config, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _config_error(exc: Exception) -> int:
    print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
    return EXIT_CONFIG


def _cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _config_error(exc)
    print(json.dumps({"ok": True, "scenario": cfg.scenario.value,
                      "estimators": [e.name for e in cfg.estimators],
                      "n_grid": list(cfg.n_grid), "config_hash": cfg.config_hash()}))
    return EXIT_OK


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = dataclasses.replace(cfg, seed=args.seed, raw={**cfg.raw, "seed": args.seed})
        if args.jobs < 1:
            raise ConfigError("--jobs must be positive")
    except ConfigError as exc:
        return _config_error(exc)
    out_dir = Path(args.out) if args.out else Path(cfg.output_path)
    try:
        outcome = run_experiment(cfg, jobs=args.jobs, out_dir=out_dir)
    except ConfigError as exc:
        return _config_error(exc)
    except FileNotFoundError as exc:
        return _config_error(exc)
    print(outcome.table.to_csv(), end="")
    print(f"wrote {out_dir / 'results.csv'} and {out_dir / 'results.json'}", file=sys.stderr)
    if outcome.failed:
        bad = {f"{k[0]}@{k[1]}": v for k, v in outcome.failure_rates.items() if v > 0.01}
        print(json.dumps({"error": "runtime", "failure_rates": bad}), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        table = ResultTable.from_csv(Path(args.table).read_text(encoding="utf-8"))
        text, records = compare_report(table, args.baseline)
    except (OSError, ValueError, KeyError) as exc:
        return _config_error(exc)
    print(json.dumps(records, indent=2) if args.json else text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sptransduct", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out", default=None, help="output directory (default: config output_path)")
    run.add_argument("--jobs", type=int, default=1, help="parallel replicate workers")
    run.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="ratios of a result table against a baseline")
    rep.add_argument("table")
    rep.add_argument("--baseline", required=True)
    rep.add_argument("--json", action="store_true", help="emit JSON records")
    rep.set_defaults(func=_cmd_report)

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    val.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
