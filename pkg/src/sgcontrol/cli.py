"""Command line interface: run scenarios, sweeps, and table collation.

Exit codes: 0 on success, 2 for configuration errors, 3 for solver
failures.  The ``SGCONTROL_OUTDIR`` environment variable overrides the
configured output directory.
"""

from __future__ import annotations

import argparse
import sys

from . import scenarios
from .scenarios import ConfigError, SolverFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _row_summary(row) -> str:
    parts = [f"scenario={row.scenario}", f"method={row.method}",
             f"J={row.cost:.4e}", f"tracking={row.tracking:.4e}",
             f"std_sq={row.std_sq:.4e}"]
    if row.e_u == row.e_u:  # not NaN
        parts.append(f"e_u={row.e_u:.4e}")
    parts.append(f"iters={row.iterations}")
    parts.append(f"seconds={row.seconds:.1f}")
    return "  ".join(parts)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sgcontrol",
        description="One-shot stochastic Galerkin / collocation control solver")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario from a config file")
    p_run.add_argument("config")

    p_sweep = sub.add_parser("sweep", help="run a penalty sweep from a config file")
    p_sweep.add_argument("config")

    p_tables = sub.add_parser(
        "tables", help="collate result rows under a directory into table CSVs")
    p_tables.add_argument("directory")
    p_tables.add_argument("--out", default=None,
                          help="where to write the table CSVs (default: in place)")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cfg = scenarios.load_config(args.config)
            row = scenarios.run_scenario(cfg)
            print(_row_summary(row))
        elif args.command == "sweep":
            cfg = scenarios.load_config(args.config)
            if not cfg.gammas:
                raise ConfigError("sweep requires a non-empty gammas list")
            for row in scenarios.run_sweep(cfg):
                print(_row_summary(row))
        else:
            grouped = scenarios.collate_tables(args.directory, args.out)
            for label, rows in sorted(grouped.items()):
                print(f"{label}: {len(rows)} rows")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
