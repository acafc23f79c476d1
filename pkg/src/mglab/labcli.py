"""Command-line interface.

Subcommands:
  run             one seeded lifetime, metrics CSV out
  sweep           hyperparameter grid, summary + best-config echo
  freq-sweep      method vs matched baseline across switch periods
  ablate-context  context-richness prefixes (or individual families)
  probe           run with probe tracking forced on
  plotdata        aggregate per-seed metrics into plot-ready CSV
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import runner
from .config import ConfigError, parse_config, parse_sweep


def _load_config(path: str):
    with open(path) as f:
        return parse_config(f.read())


def _add_common(p, seeds=False, workers=False):
    p.add_argument("--config", required=True, help="config file path")
    p.add_argument("--out", default="out", help="output directory")
    if seeds:
        p.add_argument("--seeds", type=int, default=10, help="seeds per configuration")
    if workers:
        p.add_argument("--workers", type=int, default=1, help="parallel worker processes")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mglab",
        description="meta-gradient laboratory for non-stationary gridworlds")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="execute one seeded run")
    _add_common(pr)
    pr.add_argument("--seed", type=int, default=None, help="override the config seed")
    pr.add_argument("--log-stride", type=int, default=None,
                    help="log every n-th outer iteration")

    ps = sub.add_parser("sweep", help="hyperparameter sweep with best-config selection")
    _add_common(ps, seeds=True, workers=True)

    pf = sub.add_parser("freq-sweep", help="relative improvement vs switch period")
    _add_common(pf, seeds=True, workers=True)
    pf.add_argument("--baseline-config", required=True,
                    help="matched fixed-meta-parameter baseline config")
    pf.add_argument("--periods", required=True,
                    help="comma-separated switch periods, e.g. 25000,50000,100000")

    pa = sub.add_parser("ablate-context", help="context-richness ablation")
    _add_common(pa, seeds=True, workers=True)
    pa.add_argument("--history", type=int, default=4, help="context history length")
    pa.add_argument("--individual", action="store_true",
                    help="run each feature family alone instead of prefixes")

    pp = sub.add_parser("probe", help="run with probe tracking enabled")
    _add_common(pp)
    pp.add_argument("--seed", type=int, default=None)
    pp.add_argument("--log-stride", type=int, default=None)

    pd = sub.add_parser("plotdata", help="aggregate metrics files for plotting")
    pd.add_argument("inputs", nargs="+", help="per-seed metrics CSV files")
    pd.add_argument("--kind", required=True, choices=["schedule", "probes", "freq"])
    pd.add_argument("--out", required=True, help="output CSV path")
    return p


def _cmd_run(args, probes: bool = False) -> int:
    cfg = _load_config(args.config)
    run_cfg = cfg.run
    if args.seed is not None:
        run_cfg = replace(run_cfg, seed=args.seed)
    if args.log_stride is not None:
        run_cfg = replace(run_cfg, log_stride=args.log_stride)
    if probes:
        run_cfg = replace(run_cfg, probes=True)
    cfg = replace(cfg, run=run_cfg)
    import os

    path = os.path.join(args.out, f"{cfg.label()}_seed{cfg.run.seed}.csv")
    res = runner.run(cfg, path)
    print(f"{cfg.label()} seed={cfg.run.seed} steps={res.env_steps} "
          f"total_return={res.total_return:.6g}")
    print(f"metrics: {res.path}")
    return 0


def _cmd_sweep(args) -> int:
    with open(args.config) as f:
        spec = parse_sweep(f.read())
    spec = replace(spec, seeds=args.seeds)
    result = runner.sweep(spec, args.out, workers=args.workers)
    for cell in result.cells:
        status = "ok" if cell.ok else f"FAILED ({cell.error})"
        print(f"cell {cell.index:3d} {cell.overrides} "
              f"mean={cell.mean:.6g} std={cell.std:.6g} [{status}]")
    print(f"best: cell {result.best.index} {result.best.overrides} "
          f"mean={result.best.mean:.6g}")
    print(f"summary: {args.out}/summary.csv  best config: {args.out}/best_config.cfg")
    return 0


def _cmd_freq_sweep(args) -> int:
    method = _load_config(args.config)
    with open(args.baseline_config) as f:
        baseline = parse_config(f.read())
    periods = [int(s) for s in args.periods.split(",") if s.strip()]
    rows = runner.nonstationarity_sweep(
        method, baseline, periods, seeds=args.seeds, out_dir=args.out,
        workers=args.workers)
    for row in rows:
        print(f"period={row['period']} method={row['method_mean']:.6g} "
              f"baseline={row['baseline_mean']:.6g} "
              f"improvement={row['relative_improvement_pct']:+.2f}%")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    rows = runner.richness_ablation(
        cfg, h=args.history, seeds=args.seeds, out_dir=args.out,
        workers=args.workers, individual=args.individual)
    for row in rows:
        print(f"{row['context']:>14s} mean={row['mean']:.6g} std={row['std']:.6g}")
    return 0


def _cmd_plotdata(args) -> int:
    rows = runner.emit_plotdata(args.inputs, args.kind, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "freq-sweep":
            return _cmd_freq_sweep(args)
        if args.command == "ablate-context":
            return _cmd_ablate(args)
        if args.command == "probe":
            return _cmd_run(args, probes=True)
        if args.command == "plotdata":
            return _cmd_plotdata(args)
        raise AssertionError(args.command)
    except (ConfigError, runner.UsageError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
