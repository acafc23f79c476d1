#!/usr/bin/env python3
"""Emit schedule and probe plot data for a contextual run.

Runs one desk config across seeds with probe tracking on, then aggregates
the per-seed metrics into schedule (meta-parameter and reward vs step,
95% CI) and probe (five canonical context inputs vs step) CSVs.

Usage:
    python scripts/track_schedule.py --config configs/desk/q_bmg_reward.cfg
        [--seeds 5] [--workers 2] [--out out/schedule]
"""

import argparse
import os
import sys
from dataclasses import replace

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from mglab.config import override, parse_config  # noqa: E402
from mglab.runner import _run_all, emit_plotdata  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", required=True)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--workers", type=int, default=2)
    ap.add_argument("--out", default="out/schedule")
    args = ap.parse_args()

    with open(args.config) as f:
        cfg = parse_config(f.read())
    cfg = replace(cfg, run=replace(cfg.run, probes=True))

    jobs = []
    paths = []
    for seed in range(args.seeds):
        path = os.path.join(args.out, f"seed{seed}.csv")
        paths.append(path)
        jobs.append((0, seed, override(cfg, "run.seed", seed), path))
    for _, _, _, err in _run_all(jobs, workers=args.workers):
        if err:
            print(f"run failed: {err}", file=sys.stderr)
            return 1
    emit_plotdata(paths, "schedule", os.path.join(args.out, "schedule.csv"))
    emit_plotdata(paths, "probes", os.path.join(args.out, "probes.csv"))
    print(f"wrote {args.out}/schedule.csv and {args.out}/probes.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
