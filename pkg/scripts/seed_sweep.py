"""Run the campaign scenario and its campaign-free twin over many seeds.

Reports, per seed, the cases found with and without the injected campaign
and where the backup server sits, then the overall detection and
false-positive rates.

    python scripts/seed_sweep.py --seeds 10
"""

import argparse
import logging
import sys
import tempfile
from pathlib import Path

from campaign_engine.config import load_config
from campaign_engine.link import HIGH, all_bands
from campaign_engine.pipeline import run_daily
from campaign_engine.simgen import build_scenario, fig6_scenario

EXPECTED = {"a", "b", "f"}


def run(seed: int, inject: bool, root: Path):
    corpus = build_scenario(fig6_scenario(seed, inject=inject), root / f"{'fig6' if inject else 'null'}{seed}")
    return run_daily(load_config(corpus.config_path), corpus.last_day)


def backup_stages(result) -> list[int]:
    hosts = [r.host for r in result.ranking]
    bands = all_bands(result.risks, hosts)
    return sorted(s for s, b in bands.get("backup01", {}).items() if b == HIGH)


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--first", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.ERROR)

    exact = false_cases = 0
    seeds = range(args.first, args.first + args.seeds)
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        print(f"{'seed':>4}  {'with campaign':<40} {'without':<10} backup high stages")
        for seed in seeds:
            hit = run(seed, True, root)
            null = run(seed, False, root)
            found = [sorted(c.members) for c in hit.cases]
            good = len(hit.cases) == 1 and set(hit.cases[0].members) == EXPECTED
            exact += good
            false_cases += len(null.cases)
            mark = "ok" if good else "--"
            print(f"{seed:>4}  {mark} {str(found):<37} {len(null.cases):<10} {backup_stages(null)}")
    n = len(seeds)
    print(f"\nexact {{a, b, f}} case: {exact}/{n} seeds")
    print(f"cases without a campaign: {false_cases} over {n} seeds")
    return 0 if false_cases == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
