"""Run optimal-design campaigns for several master seeds and summarize Monod recovery.

    python scripts/run_campaign.py --seeds 0 1 2 3 4 --out runs/optimal
"""
import argparse
import logging
import time
from pathlib import Path

from missing_physics import symreg
from missing_physics.campaign import run_optimal_campaign
from missing_physics.config import CampaignConfig, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/optimal")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = load_config(args.config) if args.config else CampaignConfig()
    found = 0
    t0 = time.perf_counter()
    for seed in args.seeds:
        state = run_optimal_campaign(base.with_overrides(seed=seed), out_dir=Path(args.out) / f"seed_{seed}")
        hits = state.monod_hits()
        found += bool(hits)
        print(f"\nseed {seed}")
        print(symreg.format_table(state.ranked), end="")
        print("Monod form:", hits[0][1] if hits else "not recovered")
    print(f"\nrecovered in {found}/{len(args.seeds)} campaigns, {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
