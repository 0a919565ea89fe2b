"""Generate the five-day campaign corpus, run the engine on its last day, print the case.

    python scripts/run_fig6.py --out /tmp/fig6 --seed 0
"""

import argparse
import logging
import shutil
import sys
import time
from pathlib import Path

from campaign_engine.config import load_config
from campaign_engine.pipeline import run_daily
from campaign_engine.report import render_case, render_ranking
from campaign_engine.pipeline import load_ranking
from campaign_engine.simgen import build_scenario, fig6_scenario


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("fig6-corpus"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-inject", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)

    shutil.rmtree(args.out, ignore_errors=True)
    t0 = time.perf_counter()
    corpus = build_scenario(fig6_scenario(args.seed, inject=not args.no_inject), args.out)
    result = run_daily(load_config(corpus.config_path), corpus.last_day)
    secs = time.perf_counter() - t0

    print(render_ranking(load_ranking(result.run_dir), 8))
    print(f"{len(result.cases)} case(s) in {secs:.1f} s; results in {result.run_dir}\n")
    for case in result.cases:
        print(render_case(case.to_dict()))
    ok = len(result.cases) == 1 and set(result.cases[0].members) == {"a", "b", "f"}
    if args.no_inject:
        ok = not result.cases
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
