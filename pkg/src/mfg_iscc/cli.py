"""Command-line entry point ``mfg-iscc``.

Subcommands
-----------
run        solve one scenario, export its trace (csv) or full report (json)
sweep      one run per value of ``--param``, export the metrics table
evolution  solve one scenario, export density snapshots at ``--times``
check      run the built-in invariant and oracle checks

Exit codes: 0 success, 1 invalid input (bad flags, config or check failure),
2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .checks import CHECKS, run_checks
from .config import SWEEP_PARAMS, ScenarioConfig, load_scenario, load_solver_config
from .errors import ConfigError, InvalidArgumentError, NumericalFailureError
from .harness import render, run_experiment, sweep
from .solver import SolverConfig

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # usage errors count as invalid input, not argparse's default status 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one value")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfg-iscc", description="Mean-field precoding game solver.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, formats=True):
        p.add_argument("--config", help="scenario TOML file (desk defaults when omitted)")
        p.add_argument("--out", help="output file (stdout when omitted)")
        if formats:
            p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--seed", type=_seed, default=0, help="precoder initialization seed")

    common(sub.add_parser("run", help="solve one scenario"))
    p = sub.add_parser("sweep", help="sweep one scenario parameter")
    common(p)
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, type=_floats, help="comma-separated values")
    p.add_argument("--workers", type=int, default=1, help="parallel processes")
    p = sub.add_parser("evolution", help="export density snapshots")
    common(p)
    p.add_argument("--times", type=_floats, help="comma-separated times in [0, T] (default: 5 evenly spaced)")
    p = sub.add_parser("check", help="run invariant and oracle checks")
    p.add_argument("--only", action="append", choices=sorted(CHECKS), help="run just this check (repeatable)")
    return parser


def _configs(args) -> tuple[ScenarioConfig, SolverConfig]:
    if args.config is None:
        return ScenarioConfig(), SolverConfig()
    return load_scenario(args.config), load_solver_config(args.config)


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    try:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {out}: {exc.strerror or exc}") from exc


def _dispatch(args) -> int:
    if args.command == "check":
        results = run_checks(args.only)
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
        return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID

    scenario, solver_cfg = _configs(args)
    if args.command == "run":
        report = run_experiment(scenario, solver_cfg, args.seed)
        _emit(render(report, args.format), args.out)
    elif args.command == "evolution":
        T = scenario.grid.horizon_T
        times = args.times if args.times is not None else [T * k / 4 for k in range(5)]
        report = run_experiment(scenario, solver_cfg, args.seed, snapshot_times=times)
        _emit(render(report, args.format, what="evolution"), args.out)
    else:
        table = sweep(scenario, args.param, args.values, solver_cfg, args.seed, args.workers)
        for row in table:
            if row.error is not None:
                print(f"warning: {row.param}={row.value} failed: {row.error}", file=sys.stderr)
        _emit(render(table, args.format), args.out)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalFailureError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
