"""Seeded experiment execution, sweeps, comparisons and plot-data emission.

Each run is fully determined by its config (seed included): env, agent
init, exploration and meta-net streams derive from independent sub-seeds
of the run seed, and the metrics CSV is byte-for-byte reproducible. Sweep
cells and seeds are independent processes; aggregation is deterministic
regardless of worker count.
"""

from __future__ import annotations

import csv
import math
import multiprocessing
import os
from dataclasses import dataclass, replace

import numpy as np

from .agents import InnerHyper
from .config import (
    ABLATION_ORDER,
    ExperimentConfig,
    SweepSpec,
    override,
    serialize_config,
)
from .context import PROBE_NAMES, FeatureSpec, probe_inputs
from .envs import make_env
from .metaopt import ACTrainLoop, MetaSpec, QTrainLoop


class UsageError(ValueError):
    """Invalid request to the runner or aggregators."""


def build_loop(cfg: ExperimentConfig):
    """Construct the training driver for a config."""
    ss = np.random.SeedSequence(cfg.run.seed).spawn(4)
    env = make_env(cfg.env.kind, np.random.default_rng(ss[0]), cfg.env.period,
                   cfg.env.n_mdps, cfg.env.width, cfg.env.height)
    hyper = InnerHyper(
        alpha_ent=cfg.agent.alpha_ent, alpha_l2=cfg.agent.alpha_l2,
        epsilon=cfg.agent.epsilon, lr=cfg.agent.lr, gamma=cfg.agent.gamma,
        lam=cfg.agent.lam)
    meta = None
    feature_spec = None
    if cfg.meta.objective != "none":
        meta = MetaSpec(cfg.meta.objective, cfg.meta.k, cfg.meta.l,
                        cfg.meta.meta_lr, cfg.meta.alpha_outer_ent,
                        cfg.meta.tuned, cfg.meta.meta_hidden)
        if cfg.context.enabled:
            feature_spec = FeatureSpec(
                families=cfg.context.families, h=cfg.context.h,
                include_std=cfg.context.include_std, agent_kind=cfg.agent.kind,
                n_actions=env.n_actions, n_cells=env.n_cells,
                n_meta=len(cfg.meta.tuned))
    cls = ACTrainLoop if cfg.agent.kind == "ac" else QTrainLoop
    return cls(env, cfg.agent.hidden, hyper, meta, feature_spec,
               rng_agent=np.random.default_rng(ss[1]),
               rng_act=np.random.default_rng(ss[2]),
               rng_meta=np.random.default_rng(ss[3]),
               log_updates=cfg.run.log_updates)


def metrics_columns(cfg: ExperimentConfig) -> list[str]:
    """The CSV schema is a pure function of the config."""
    cols = ["env_step", "outer_iteration", "task_index", "mean_rollout_reward",
            "cumulative_return", "return_per_1e5", "inner_loss"]
    if cfg.meta.objective != "none":
        cols.append("outer_loss")
        cols.extend(f"meta_{name}" for name in cfg.meta.tuned)
    if cfg.run.probes:
        cols.extend(f"probe_{name}" for name in PROBE_NAMES)
    return cols


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else format(x, ".12g")
    return str(x)


@dataclass
class RunResult:
    total_return: float
    env_steps: int
    path: str | None


def run(cfg: ExperimentConfig, out_path: str | None = None) -> RunResult:
    """Execute one full lifetime and write the metrics CSV."""
    loop = build_loop(cfg)
    lifetime = cfg.env.lifetime
    stride = cfg.run.log_stride
    cols = metrics_columns(cfg)
    probe_vecs = None
    if cfg.run.probes:
        probe_vecs = probe_inputs(loop.feature_spec)

    rows = []
    last_steps = 0
    last_return = 0.0
    while loop.env_steps < lifetime:
        m = loop.advance(lifetime - loop.env_steps)
        final = loop.env_steps >= lifetime
        if loop.iteration % stride == 0 or final:
            dsteps = loop.env_steps - last_steps
            row = {
                "env_step": loop.env_steps,
                "outer_iteration": loop.iteration,
                "task_index": loop.env.task_index,
                "mean_rollout_reward": (loop.cumulative_return - last_return) / max(dsteps, 1),
                "cumulative_return": loop.cumulative_return,
                "return_per_1e5": loop.cumulative_return / loop.env_steps * 1e5,
                "inner_loss": loop.last_inner_loss,
            }
            if cfg.meta.objective != "none":
                row["outer_loss"] = m["outer_loss"]
                for name in cfg.meta.tuned:
                    row[f"meta_{name}"] = loop.last_meta.get(name, math.nan)
            if probe_vecs is not None:
                net = loop.meta_state.nets[cfg.meta.tuned[0]]
                for name in PROBE_NAMES:
                    row[f"probe_{name}"] = net.predict_raw(probe_vecs[name])
            rows.append(row)
            last_steps = loop.env_steps
            last_return = loop.cumulative_return

    if out_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w", newline="") as f:
            f.write(",".join(cols) + "\n")
            for row in rows:
                f.write(",".join(_fmt(row[c]) for c in cols) + "\n")
        if cfg.run.log_updates:
            upath = os.path.splitext(out_path)[0] + "_updates.csv"
            names = list(cfg.meta.tuned) if cfg.meta.objective != "none" else []
            with open(upath, "w", newline="") as f:
                f.write(",".join(["env_step"] + [f"meta_{n}" for n in names]) + "\n")
                for step, vals in loop.update_log:
                    f.write(",".join([str(step)] + [_fmt(vals.get(n, math.nan)) for n in names]) + "\n")
    return RunResult(loop.cumulative_return, loop.env_steps, out_path)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def _run_job(args):
    idx, seed, cfg, path = args
    try:
        res = run(replace(cfg, run=replace(cfg.run, seed=seed)), path)
        return idx, seed, res.total_return, None
    except Exception as e:  # cell failures are surfaced, not fatal
        return idx, seed, math.nan, f"{type(e).__name__}: {e}"


def _run_all(jobs, workers: int):
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(workers) as pool:
        return pool.map(_run_job, jobs)


@dataclass
class SweepCell:
    index: int
    overrides: dict
    config: ExperimentConfig
    totals: list
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def mean(self) -> float:
        return float(np.mean(self.totals)) if self.ok else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.totals)) if self.ok else math.nan


@dataclass
class SweepResult:
    cells: list
    best: SweepCell
    n_cells: int
    seeds: int


def sweep(spec: SweepSpec, out_dir: str | None = None, workers: int = 1) -> SweepResult:
    """Run every (cell x seed); select the best cell by mean total return.

    Ties break toward the lower meta learning rate, then the lexicographic
    order of the serialized config. Any failing run marks its whole cell
    failed; failed cells are excluded from selection and surfaced.
    """
    cells = spec.cells()
    if not cells:
        raise UsageError("empty sweep grid")
    jobs = []
    for i, (overrides, cfg) in enumerate(cells):
        for seed in range(spec.seeds):
            path = None
            if out_dir is not None:
                path = os.path.join(out_dir, f"cell{i:03d}", f"seed{seed}.csv")
            jobs.append((i, seed, cfg, path))
    outcomes = _run_all(jobs, workers)

    results = [SweepCell(i, ov, cfg, []) for i, (ov, cfg) in enumerate(cells)]
    for idx, seed, total, err in sorted(outcomes, key=lambda r: (r[0], r[1])):
        cell = results[idx]
        if err is not None:
            cell.error = err
        cell.totals.append(total)

    ok = [c for c in results if c.ok]
    if not ok:
        raise UsageError("every sweep cell failed")
    best = min(ok, key=lambda c: (-c.mean, c.config.meta.meta_lr,
                                  serialize_config(c.config)))
    result = SweepResult(results, best, len(cells), spec.seeds)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        keys = list(spec.grid.keys())
        with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as f:
            f.write(",".join(["cell"] + keys + ["mean", "std", "seeds", "status"]) + "\n")
            for c in results:
                status = "ok" if c.ok else f"failed ({c.error})"
                f.write(",".join(
                    [str(c.index)] + [_fmt(c.overrides[k]) for k in keys]
                    + [_fmt(c.mean), _fmt(c.std), str(len(c.totals)),
                       status.replace(",", ";")]) + "\n")
        with open(os.path.join(out_dir, "best_config.cfg"), "w") as f:
            f.write(serialize_config(best.config))
    return result


def run_seeds(cfg: ExperimentConfig, seeds, out_dir: str | None = None,
              workers: int = 1, name: str = "run") -> list:
    """Run one config over several seeds; returns totals in seed order."""
    jobs = []
    for seed in seeds:
        path = os.path.join(out_dir, f"{name}_seed{seed}.csv") if out_dir else None
        jobs.append((0, seed, cfg, path))
    outcomes = sorted(_run_all(jobs, workers), key=lambda r: r[1])
    bad = [err for _, _, _, err in outcomes if err]
    if bad:
        raise UsageError(f"run failed: {bad[0]}")
    return [total for _, _, total, _ in outcomes]


# ---------------------------------------------------------------------------
# Comparisons
# ---------------------------------------------------------------------------


def relative_improvement(method_totals, baseline_totals) -> dict:
    """Percent change of the method mean over the baseline mean."""
    if len(method_totals) == 0 or len(baseline_totals) == 0:
        raise UsageError("relative improvement needs non-empty samples")
    mb = float(np.mean(baseline_totals))
    if abs(mb) < 1e-9:
        raise UsageError("relative improvement undefined: baseline mean is zero")
    percent = 100.0 * (float(np.mean(method_totals)) - mb) / abs(mb)
    per_seed = [100.0 * (m - mb) / abs(mb) for m in method_totals]
    return {"percent": percent, "per_seed": per_seed}


def assert_fair_comparison(*grid_sizes) -> None:
    """Comparative reports require equal sweep cardinality per method."""
    if len(set(grid_sizes)) > 1:
        raise UsageError(
            f"unfair comparison: sweep grid sizes differ {grid_sizes}")


def compare_sweeps(method: SweepResult, baseline: SweepResult) -> dict:
    """Relative improvement of one sweep's best cell over another's.

    Refuses to compare sweeps of different grid cardinality, so reported
    best-of-sweep numbers always come from equally sized searches.
    """
    assert_fair_comparison(method.n_cells, baseline.n_cells)
    rel = relative_improvement(method.best.totals, baseline.best.totals)
    return {
        "method_mean": method.best.mean,
        "baseline_mean": baseline.best.mean,
        "relative_improvement_pct": rel["percent"],
        "per_seed": rel["per_seed"],
    }


def nonstationarity_sweep(method_cfg: ExperimentConfig, baseline_cfg: ExperimentConfig,
                          periods, seeds: int = 10, out_dir: str | None = None,
                          workers: int = 1) -> list:
    """Method vs matched baseline at several task-switch periods."""
    if any(p <= 0 for p in periods):
        raise UsageError("periods must be positive")
    assert_fair_comparison(1, 1)  # single configs on both sides
    rows = []
    per_seed_rows = []
    for period in periods:
        mcfg = override(method_cfg, "env.period", int(period))
        bcfg = override(baseline_cfg, "env.period", int(period))
        mdir = os.path.join(out_dir, f"period{period}") if out_dir else None
        m_tot = run_seeds(mcfg, range(seeds), mdir, workers, name="method")
        b_tot = run_seeds(bcfg, range(seeds), mdir, workers, name="baseline")
        rel = relative_improvement(m_tot, b_tot)
        rows.append({
            "period": period, "method": method_cfg.label(),
            "method_mean": float(np.mean(m_tot)), "method_std": float(np.std(m_tot)),
            "baseline_mean": float(np.mean(b_tot)), "baseline_std": float(np.std(b_tot)),
            "relative_improvement_pct": rel["percent"],
        })
        for seed in range(seeds):
            per_seed_rows.append({
                "period": period, "seed": seed, "method_total": m_tot[seed],
                "baseline_total": b_tot[seed],
                "relative_pct": rel["per_seed"][seed],
            })
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_dict_csv(os.path.join(out_dir, "freq_summary.csv"), rows)
        _write_dict_csv(os.path.join(out_dir, "freq_perseed.csv"), per_seed_rows)
    return rows


def richness_ablation(base_cfg: ExperimentConfig, h: int = 4, seeds: int = 10,
                      out_dir: str | None = None, workers: int = 1,
                      individual: bool = False) -> list:
    """Prefix (or individual-family) context configurations at history h."""
    if not base_cfg.context.enabled:
        raise UsageError("the ablation needs a contextual base config")
    include_std = base_cfg.agent.kind == "ac"
    variants: list[tuple[str, ExperimentConfig]] = []

    none_cfg = replace(base_cfg, context=replace(base_cfg.context, enabled=False),
                       run=replace(base_cfg.run, probes=False))
    if individual:
        for fam in ABLATION_ORDER:
            cfg = replace(base_cfg, context=replace(
                base_cfg.context, enabled=True, families=(fam,), h=h,
                include_std=include_std), run=replace(base_cfg.run, probes=False))
            variants.append((fam, cfg))
    else:
        variants.append(("none", none_cfg))
        for i in range(1, len(ABLATION_ORDER) + 1):
            fams = ABLATION_ORDER[:i]
            label = fams[0] if i == 1 else "+" + fams[-1]
            cfg = replace(base_cfg, context=replace(
                base_cfg.context, enabled=True, families=fams, h=h,
                include_std=include_std), run=replace(base_cfg.run, probes=False))
            variants.append((label, cfg))

    rows = []
    per_seed_rows = []
    for label, cfg in variants:
        vdir = os.path.join(out_dir, label.replace("+", "plus_")) if out_dir else None
        totals = run_seeds(cfg, range(seeds), vdir, workers, name="run")
        rows.append({
            "context": label,
            "families": "|".join(cfg.context.families) if cfg.context.enabled else "",
            "mean": float(np.mean(totals)), "std": float(np.std(totals)),
        })
        for seed, total in enumerate(totals):
            per_seed_rows.append({"context": label, "seed": seed, "total": total})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_dict_csv(os.path.join(out_dir, "ablation_summary.csv"), rows)
        _write_dict_csv(os.path.join(out_dir, "ablation_perseed.csv"), per_seed_rows)
    return rows


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------


def _write_dict_csv(path: str, rows: list) -> None:
    if not rows:
        raise UsageError("nothing to write")
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def _read_csv(path: str) -> dict:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        data = {c: [] for c in header}
        for line in reader:
            for c, v in zip(header, line):
                data[c].append(v)
    out = {}
    for c, vals in data.items():
        try:
            out[c] = np.array([float(v) for v in vals])
        except ValueError:
            out[c] = np.array(vals)
    return out


def emit_plotdata(paths, kind: str, out_path: str) -> list:
    """Aggregate per-seed metrics files into plot-ready CSV.

    kinds: "schedule" (mean and 95% CI of meta-parameters and mean reward
    vs step), "probes" (mean and std of the five probe outputs vs step),
    "freq" (median and IQR vs period from a per-seed frequency sweep).
    """
    if not paths:
        raise UsageError("no input files")
    if kind == "freq":
        rows = _freq_plotdata(paths)
    elif kind in ("schedule", "probes"):
        rows = _timeseries_plotdata(paths, kind)
    else:
        raise UsageError(f"unknown plotdata kind {kind!r}")
    _write_dict_csv(out_path, rows)
    return rows


def _timeseries_plotdata(paths, kind: str) -> list:
    tables = [_read_csv(p) for p in paths]
    steps = tables[0]["env_step"]
    for t in tables[1:]:
        if len(t["env_step"]) != len(steps) or not np.array_equal(t["env_step"], steps):
            raise UsageError("seed-count or logging-grid mismatch across inputs")
    if kind == "probes":
        cols = [f"probe_{n}" for n in PROBE_NAMES]
        if any(c not in tables[0] for c in cols):
            raise UsageError("probes absent from the input metrics")
    else:
        cols = ["mean_rollout_reward"] + [c for c in tables[0] if c.startswith("meta_")]
    n = len(tables)
    rows = []
    for i in range(len(steps)):
        row = {"env_step": int(steps[i]), "n_seeds": n}
        for c in cols:
            vals = np.array([t[c][i] for t in tables])
            mean = float(vals.mean())
            if kind == "probes":
                row[f"{c}_mean"] = mean
                row[f"{c}_std"] = float(vals.std())
            else:
                half = 1.96 * float(vals.std()) / math.sqrt(n)
                row[f"{c}_mean"] = mean
                row[f"{c}_ci_lo"] = mean - half
                row[f"{c}_ci_hi"] = mean + half
        rows.append(row)
    return rows


def _freq_plotdata(paths) -> list:
    rows_in = []
    for p in paths:
        t = _read_csv(p)
        for i in range(len(t["period"])):
            rows_in.append((float(t["period"][i]), float(t["method_total"][i]),
                            float(t["relative_pct"][i])))
    by_period: dict = {}
    for period, total, rel in rows_in:
        by_period.setdefault(period, []).append((total, rel))
    counts = {len(v) for v in by_period.values()}
    if len(counts) > 1:
        raise UsageError("seed-count mismatch across periods")
    rows = []
    for period in sorted(by_period):
        totals = np.array([t for t, _ in by_period[period]])
        rels = np.array([r for _, r in by_period[period]])
        rows.append({
            "period": int(period),
            "total_median": float(np.median(totals)),
            "total_q25": float(np.percentile(totals, 25)),
            "total_q75": float(np.percentile(totals, 75)),
            "relative_median": float(np.median(rels)),
            "relative_q25": float(np.percentile(rels, 25)),
            "relative_q75": float(np.percentile(rels, 75)),
            "n_seeds": len(totals),
        })
    return rows
