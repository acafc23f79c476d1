#!/usr/bin/env python3
"""Desk-scale reproduction of the Two Colors performance-trend tables.

Runs the pinned desk configs (1M steps, switch period 100k) for the
Q(lambda) family and the Actor-Critic family over several seeds each,
then prints mean/std total returns and the relative improvement of every
meta-gradient variant over its matched baseline.

Usage:
    python scripts/reproduce_trends.py [--seeds 5] [--workers 2]
        [--family q|ac|both] [--out out/trends]
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from mglab.config import override, parse_config  # noqa: E402
from mglab.runner import _run_all, relative_improvement  # noqa: E402

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs", "desk")

FAMILIES = {
    "q": ["q_baseline.cfg", "q_bmg.cfg", "q_bmg_reward.cfg"],
    "ac": ["ac_baseline.cfg", "ac_bmg.cfg", "ac_bmg_reward.cfg"],
}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--workers", type=int, default=2)
    ap.add_argument("--family", choices=["q", "ac", "both"], default="both")
    ap.add_argument("--out", default="out/trends")
    args = ap.parse_args()

    families = ["q", "ac"] if args.family == "both" else [args.family]
    for family in families:
        names = FAMILIES[family]
        jobs = []
        for name in names:
            with open(os.path.join(CONFIG_DIR, name)) as f:
                cfg = parse_config(f.read())
            stem = os.path.splitext(name)[0]
            for seed in range(args.seeds):
                path = os.path.join(args.out, f"{stem}_seed{seed}.csv")
                jobs.append((0, seed, override(cfg, "run.seed", seed), path))
        outcomes = _run_all(jobs, workers=args.workers)
        totals: dict[str, list[float]] = {}
        for job, (idx, seed, total, err) in zip(jobs, outcomes):
            if err:
                print(f"run failed: {err}", file=sys.stderr)
                return 1
            stem = os.path.basename(job[3]).rsplit("_seed", 1)[0]
            totals.setdefault(stem, []).append(total)

        base_name = f"{family}_baseline"
        print(f"\n== Two Colors, {family} agents "
              f"(total return after 1M steps, {args.seeds} seeds) ==")
        for stem in [os.path.splitext(n)[0] for n in names]:
            t = np.asarray(totals[stem])
            line = f"{stem:<16} {t.mean():9.1f} ({t.std():.1f})"
            if stem != base_name:
                rel = relative_improvement(totals[stem], totals[base_name])
                line += f"  {rel['percent']:+.1f}% vs baseline"
            print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
