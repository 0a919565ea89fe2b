"""Command line: run, explain, validate, simgen, rank.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import load_config, validate_config
from .ingest import ConfigError
from .pipeline import DataError, load_ranking, run_daily
from .report import render_case, render_ranking
from .simgen import SimulationError, build_scenario, fig6_scenario, load_scenario
from .store import ResultsStore, StoreLockedError, read_json

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("campaign_engine")


def _day(s: str) -> dt.date:
    try:
        return dt.date.fromisoformat(s)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a YYYY-MM-DD date: {s!r}") from exc


def _positive(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="campaign-engine", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the daily batch for one day")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--day", required=True, type=_day)
    r.add_argument("--window", type=_positive, help="window length in days")
    r.add_argument("--seeds", type=_positive, help="number of top-ranked seeds to grow cases from")
    r.add_argument("--out", type=Path, help="results directory (overrides the config)")

    e = sub.add_parser("explain", help="print a case's evidence with reason codes")
    e.add_argument("case_id")
    e.add_argument("--config", type=Path)
    e.add_argument("--out", type=Path, help="results directory")

    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("--config", required=True, type=Path)

    s = sub.add_parser("simgen", help="generate a synthetic corpus")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--scenario", type=Path, help="scenario TOML; default is the built-in fig6 scenario")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-inject", action="store_true", help="baseline only")

    k = sub.add_parser("rank", help="print the ranking of a finished run")
    k.add_argument("--config", type=Path)
    k.add_argument("--out", type=Path, help="results directory")
    k.add_argument("--day", type=_day, help="default: latest run")
    k.add_argument("--top", type=_positive, default=20)
    return p


def _store(args) -> ResultsStore:
    if args.out is not None:
        return ResultsStore(args.out)
    if args.config is not None:
        return ResultsStore(load_config(args.config).results_dir)
    raise ConfigError("need --config or --out to locate the results store")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    res = run_daily(cfg, args.day, window_days=args.window, seed_count=args.seeds, out=args.out)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{args.day.isoformat()}: {len(res.cases)} case(s); results in {res.run_dir}")
    for c in res.cases:
        print(f"  {c.case_id}  members {', '.join(c.members)}  stages {c.high_stages}")
    return EXIT_OK


def cmd_explain(args) -> int:
    store = _store(args)
    path = store.find_case(args.case_id)
    if path is None:
        print(f"unknown case id {args.case_id!r} in {store.root}", file=sys.stderr)
        return EXIT_DATA
    sys.stdout.write(render_case(read_json(path)))
    return EXIT_OK


def cmd_validate(args) -> int:
    diags = validate_config(args.config)
    for d in diags:
        print(d)
    if diags:
        print(f"{len(diags)} problem(s) in {args.config}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{args.config}: ok")
    return EXIT_OK


def cmd_simgen(args) -> int:
    if args.scenario is not None:
        scenario = load_scenario(args.scenario)
        if args.no_inject:
            scenario.script.actions.clear()
    else:
        scenario = fig6_scenario(args.seed, inject=not args.no_inject)
    corpus = build_scenario(scenario, args.out)
    print(f"wrote {corpus.days} days for {len(corpus.spec.hosts)} hosts to {corpus.root}")
    print(f"config: {corpus.config_path}")
    print(f"last day: {corpus.last_day.isoformat()}")
    return EXIT_OK


def cmd_rank(args) -> int:
    store = _store(args)
    run = store.run_dir(args.day) if args.day else store.latest_run()
    if run is None or not (run / "ranking.csv").exists():
        print(f"no finished run in {store.root}", file=sys.stderr)
        return EXIT_DATA
    sys.stdout.write(render_ranking(load_ranking(run), args.top))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "explain": cmd_explain,
    "validate": cmd_validate,
    "simgen": cmd_simgen,
    "rank": cmd_rank,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, SimulationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StoreLockedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
