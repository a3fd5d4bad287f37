"""``uhmc`` command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 a validation check found a counterexample.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from ..bounds import reports_to_json
from ..integrate import IntegratorBlowUp
from ..kernel import ResidualCapExceeded
from ..variational import ConvergenceError
from .config import ConfigError, parse_config, print_schema
from .experiments import RunReport, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_COUNTEREXAMPLE = 0, 1, 2, 3

log = logging.getLogger("uhmc")

SUBCOMMANDS = {
    "sample": "sample",
    "couple": "couple",
    "mixing-time": "mixing_time",
    "bias-scan": "bias_scan",
    "validate": "validate",
    "bounds": "bounds",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uhmc", description=__doc__.splitlines()[0])
    parser.add_argument("--print-schema", action="store_true", help="print the config keys and exit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for replica shards")
    common.add_argument("--out", type=Path, help="output directory (overrides config)")
    common.add_argument("--print-schema", action="store_true", help="print the config keys and exit")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} experiment")
    return parser


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_outputs(report: RunReport, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (header, rows) in report.tables.items():
        path = out / f"{name}.csv"
        _write_csv(path, header, rows)
        written.append(path)
    path = out / f"{report.experiment}_report.json"
    path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    written.append(path)
    if report.bounds is not None:
        path = out / "bounds.json"
        path.write_text(reports_to_json(report.bounds))
        written.append(path)
    return written


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_schema:
        sys.stdout.write(print_schema())
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        text = args.config.read_text() if args.config else ""
        cfg = parse_config(text, {"experiment": SUBCOMMANDS[args.command], "seed": args.seed,
                                  "out": str(args.out) if args.out else None})
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run_experiment(cfg, threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegratorBlowUp, ConvergenceError, ResidualCapExceeded, FloatingPointError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    paths = write_outputs(report, Path(cfg["out"]))
    log.info("wall clock %.2fs, %d gradient evaluations", report.wall_clock, report.gradient_evals)
    for path in paths:
        print(path)
    if cfg["experiment"] == "validate" and report.failed_checks:
        print(f"{report.failed_checks} checks found counterexamples", file=sys.stderr)
        return EXIT_COUNTEREXAMPLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
