"""Config ingestion, run/sweep machinery, CSV outputs, CLI surface."""

import math
import os

import numpy as np
import pytest

from mglab import labcli, runner
from mglab.config import (
    AC_ALPHA_ENT_CANDIDATES,
    ConfigError,
    SweepSpec,
    default_grid,
    override,
    parse_config,
    parse_sweep,
    serialize_config,
)
from mglab.runner import (
    UsageError,
    emit_plotdata,
    metrics_columns,
    nonstationarity_sweep,
    relative_improvement,
    richness_ablation,
    run,
    sweep,
)

AC_SMOKE = """
[env]
kind = two_colors
period = 200
lifetime = 480

[agent]
kind = ac
hidden = 8
alpha_ent = 0.1

[run]
seed = 3
"""

Q_BMG_SMOKE = """
[env]
kind = two_colors
period = 200
lifetime = 400

[agent]
kind = q
hidden = 8
lr = 3e-5

[meta]
objective = bmg
k = 0
l = 4
meta_lr = 1e-3
tuned = epsilon
meta_hidden = 4

[context]
enabled = true
families = reward
h = 10

[run]
seed = 1
probes = true
"""

Q_BASELINE_SMOKE = """
[env]
kind = two_colors
period = 300
lifetime = 600

[agent]
kind = q
hidden = 8
lr = 3e-3
epsilon = 0.3

[run]
seed = 0
"""


class TestConfig:
    def test_round_trip(self):
        cfg = parse_config(Q_BMG_SMOKE)
        assert parse_config(serialize_config(cfg)) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("[env]\nperiodd = 100\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[envs]\nperiod = 100\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="expected an integer"):
            parse_config("[env]\nperiod = soon\n")

    def test_q_with_mg_rejected_before_simulation(self):
        text = "[agent]\nkind = q\n\n[meta]\nobjective = mg\ntuned = epsilon\n"
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_probes_need_reward_context(self):
        text = AC_SMOKE + "\n[context]\nenabled = false\n"
        cfg = parse_config(text)
        with pytest.raises(ConfigError):
            parse_config(serialize_config(cfg).replace("probes = false", "probes = true"))

    def test_override(self):
        cfg = parse_config(AC_SMOKE)
        new = override(cfg, "agent.alpha_ent", 0.4)
        assert new.agent.alpha_ent == 0.4
        with pytest.raises(ConfigError):
            override(cfg, "agent.nonsense", 1)

    def test_label(self):
        assert parse_config(AC_SMOKE).label() == "ac"
        assert parse_config(Q_BMG_SMOKE).label() == "q-bmg-reward"

    def test_default_grid_matches_candidates(self):
        cfg = parse_config(AC_SMOKE)
        grid = default_grid(cfg)
        assert grid == {"agent.alpha_ent": list(AC_ALPHA_ENT_CANDIDATES)}

    def test_meta_grids_have_equal_size(self):
        base = parse_config(AC_SMOKE)
        mg = override(override(base, "meta.objective", "mg"), "meta.k", 1)
        bmg = override(override(base, "meta.objective", "bmg"), "meta.k", 1)
        size = lambda g: int(np.prod([len(v) for v in g.values()]))
        assert size(default_grid(mg)) == size(default_grid(bmg))

    def test_parse_sweep_defaults_to_candidate_grid(self):
        spec = parse_sweep(AC_SMOKE)
        assert spec.grid == {"agent.alpha_ent": list(AC_ALPHA_ENT_CANDIDATES)}
        assert spec.seeds == 10

    def test_parse_sweep_explicit_grid(self):
        text = AC_SMOKE + "\n[sweep]\nseeds = 2\n\n[grid]\nagent.alpha_ent = 0.0, 0.2\n"
        spec = parse_sweep(text)
        assert spec.grid == {"agent.alpha_ent": [0.0, 0.2]}
        assert len(spec.cells()) == 2


class TestRun:
    def test_smoke_csv(self, tmp_path):
        cfg = parse_config(AC_SMOKE)
        path = str(tmp_path / "m.csv")
        res = run(cfg, path)
        assert res.env_steps == 480
        lines = open(path).read().splitlines()
        header = lines[0].split(",")
        assert header == metrics_columns(cfg)
        steps = [int(l.split(",")[0]) for l in lines[1:]]
        assert steps == sorted(steps)
        assert steps[-1] == 480
        for line in lines[1:]:
            reward = float(line.split(",")[3])
            assert math.isfinite(reward)

    def test_byte_identical_rerun(self, tmp_path):
        cfg = parse_config(Q_BMG_SMOKE)
        p1, p2 = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        run(cfg, p1)
        run(cfg, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_task_index_increments_at_period(self, tmp_path):
        cfg = parse_config(AC_SMOKE)  # period 200, lifetime 480
        path = str(tmp_path / "m.csv")
        run(cfg, path)
        lines = open(path).read().splitlines()[1:]
        for line in lines:
            parts = line.split(",")
            step, task = int(parts[0]), int(parts[2])
            assert task == step // 200

    def test_lifetime_not_divisible_by_rollout(self, tmp_path):
        cfg = override(parse_config(AC_SMOKE), "env.lifetime", 100)
        res = run(cfg, str(tmp_path / "m.csv"))
        assert res.env_steps == 100

    def test_schema_is_function_of_config(self):
        base = ["env_step", "outer_iteration", "task_index", "mean_rollout_reward",
                "cumulative_return", "return_per_1e5", "inner_loss"]
        assert metrics_columns(parse_config(AC_SMOKE)) == base
        assert metrics_columns(parse_config(Q_BMG_SMOKE)) == base + [
            "outer_loss", "meta_epsilon", "probe_high", "probe_increasing",
            "probe_zero", "probe_decreasing", "probe_low"]

    def test_probe_columns_present_and_in_range(self, tmp_path):
        cfg = parse_config(Q_BMG_SMOKE)
        path = str(tmp_path / "m.csv")
        run(cfg, path)
        lines = open(path).read().splitlines()
        idx = lines[0].split(",").index("probe_high")
        for line in lines[1:]:
            vals = [float(v) for v in line.split(",")[idx: idx + 5]]
            assert all(0.0 < v < 1.0 for v in vals)

    def test_dense_update_log(self, tmp_path):
        text = Q_BMG_SMOKE.replace("probes = true", "probes = true\nlog_updates = true")
        cfg = parse_config(text)
        path = str(tmp_path / "m.csv")
        run(cfg, path)
        upath = str(tmp_path / "m_updates.csv")
        lines = open(upath).read().splitlines()
        assert lines[0] == "env_step,meta_epsilon"
        assert len(lines) > 100


class TestSweep:
    def _spec(self, grid, seeds=2, lifetime=160):
        base = override(parse_config(AC_SMOKE), "env.lifetime", lifetime)
        return SweepSpec(base=base, grid=grid, seeds=seeds)

    def test_single_cell_is_best(self, tmp_path):
        spec = self._spec({"agent.alpha_ent": [0.1]})
        result = sweep(spec, str(tmp_path))
        assert result.best.index == 0
        assert result.n_cells == 1
        assert os.path.exists(tmp_path / "summary.csv")
        assert os.path.exists(tmp_path / "best_config.cfg")
        echoed = parse_config(open(tmp_path / "best_config.cfg").read())
        assert echoed.agent.alpha_ent == 0.1

    def test_tie_breaks_to_lower_meta_lr(self):
        # identical runs (meta_lr does not affect a baseline) force a tie
        base = override(parse_config(AC_SMOKE), "env.lifetime", 96)
        spec = SweepSpec(base=base, grid={"meta.meta_lr": [1e-3, 1e-5]}, seeds=1)
        result = sweep(spec, None)
        assert result.best.config.meta.meta_lr == 1e-5

    def test_failed_cell_excluded_and_surfaced(self, tmp_path):
        # epsilon > 1 passes config parsing of floats but fails validation
        # inside the run, marking the cell failed
        base = override(parse_config(AC_SMOKE), "env.lifetime", 96)
        spec = SweepSpec(base=base, grid={"agent.alpha_ent": [0.1]}, seeds=1)

        import mglab.runner as r

        spec2 = SweepSpec(base=base, grid={"agent.alpha_ent": [0.1, 0.2]}, seeds=1)
        orig = r._run_job

        def boom(args):
            idx, seed, cfg, path = args
            if idx == 0 and seed == 0:
                return idx, seed, math.nan, "RuntimeError: injected"
            return orig(args)

        try:
            r._run_job = boom  # fail exactly the first cell
            result = sweep(spec2, str(tmp_path))
        finally:
            r._run_job = orig
        assert not result.cells[0].ok
        assert result.best.index == 1
        summary = open(tmp_path / "summary.csv").read()
        assert "failed" in summary

    def test_parallel_matches_serial(self, tmp_path):
        spec = self._spec({"agent.alpha_ent": [0.0, 0.2]}, seeds=2, lifetime=96)
        serial = sweep(spec, None, workers=1)
        parallel = sweep(spec, None, workers=2)
        for a, b in zip(serial.cells, parallel.cells):
            assert a.totals == b.totals


class TestComparisons:
    def test_relative_improvement_values(self):
        assert relative_improvement([1.5], [1.0])["percent"] == pytest.approx(50.0)
        assert relative_improvement([1.0, 2.0], [1.0, 2.0])["percent"] == pytest.approx(0.0)
        table1 = relative_improvement([1.79], [1.24])["percent"]
        assert round(table1, 1) == 44.4

    def test_negative_baseline_uses_absolute_value(self):
        assert relative_improvement([-0.5], [-1.0])["percent"] == pytest.approx(50.0)

    def test_zero_baseline_rejected(self):
        with pytest.raises(UsageError, match="undefined"):
            relative_improvement([1.0], [1e-12])

    def test_per_seed_emission(self):
        out = relative_improvement([1.5, 0.5], [1.0])
        assert out["per_seed"] == pytest.approx([50.0, -50.0])

    def test_freq_sweep_rows(self, tmp_path):
        method = override(parse_config(Q_BMG_SMOKE), "env.lifetime", 600)
        baseline = parse_config(Q_BASELINE_SMOKE)
        rows = nonstationarity_sweep(method, baseline, [300, 600], seeds=2,
                                     out_dir=str(tmp_path))
        assert [r["period"] for r in rows] == [300, 600]
        assert os.path.exists(tmp_path / "freq_summary.csv")
        assert os.path.exists(tmp_path / "freq_perseed.csv")

    def test_period_equal_lifetime_is_stationary_control(self):
        cfg = override(parse_config(AC_SMOKE), "env.period", 480)
        res = run(cfg, None)
        assert res.env_steps == 480

    def test_sweep_comparison_requires_equal_grids(self):
        from mglab.runner import compare_sweeps

        base = override(parse_config(AC_SMOKE), "env.lifetime", 96)
        small = sweep(SweepSpec(base=base, grid={"agent.alpha_ent": [0.1]}, seeds=1), None)
        big = sweep(SweepSpec(base=base, grid={"agent.alpha_ent": [0.1, 0.2]}, seeds=1), None)
        with pytest.raises(UsageError, match="unfair"):
            compare_sweeps(big, small)
        out = compare_sweeps(big, big)
        assert out["relative_improvement_pct"] == pytest.approx(0.0)


class TestAblation:
    def test_prefix_labels(self, tmp_path):
        base = parse_config(Q_BMG_SMOKE.replace("kind = q", "kind = ac")
                            .replace("objective = bmg", "objective = bmg")
                            .replace("k = 0", "k = 1")
                            .replace("l = 4", "l = 2")
                            .replace("tuned = epsilon", "tuned = alpha_ent")
                            .replace("meta_hidden = 4", "meta_hidden = 4")
                            .replace("probes = true", "probes = false"))
        base = override(base, "env.lifetime", 96)
        rows = richness_ablation(base, h=4, seeds=1, out_dir=str(tmp_path))
        labels = [r["context"] for r in rows]
        assert labels == ["none", "value", "+reward", "+td_error", "+action_probs",
                          "+grad_cosine", "+prev_meta", "+states"]
        assert rows[0]["families"] == ""

    def test_individual_mode(self):
        base = parse_config(Q_BMG_SMOKE.replace("kind = q", "kind = ac")
                            .replace("k = 0", "k = 1")
                            .replace("l = 4", "l = 2")
                            .replace("tuned = epsilon", "tuned = alpha_ent")
                            .replace("probes = true", "probes = false"))
        base = override(base, "env.lifetime", 64)
        rows = richness_ablation(base, h=4, seeds=1, individual=True)
        assert [r["context"] for r in rows] == [
            "value", "reward", "td_error", "action_probs", "grad_cosine",
            "prev_meta", "states"]


class TestPlotdata:
    def _runs(self, tmp_path, n=3):
        cfg = parse_config(Q_BMG_SMOKE)
        paths = []
        for seed in range(n):
            c = override(cfg, "run.seed", seed)
            p = str(tmp_path / f"s{seed}.csv")
            run(c, p)
            paths.append(p)
        return paths

    def test_schedule_aggregation_ci(self, tmp_path):
        paths = self._runs(tmp_path)
        out = str(tmp_path / "sched.csv")
        rows = emit_plotdata(paths, "schedule", out)
        tables = [runner._read_csv(p) for p in paths]
        i = len(rows) // 2
        vals = np.array([t["meta_epsilon"][i] for t in tables])
        expected_half = 1.96 * vals.std() / np.sqrt(len(paths))
        assert rows[i]["meta_epsilon_mean"] == pytest.approx(vals.mean())
        assert rows[i]["meta_epsilon_ci_hi"] - rows[i]["meta_epsilon_mean"] == pytest.approx(expected_half)

    def test_probes_aggregation(self, tmp_path):
        paths = self._runs(tmp_path, n=2)
        rows = emit_plotdata(paths, "probes", str(tmp_path / "p.csv"))
        assert "probe_low_mean" in rows[0]
        assert "probe_low_std" in rows[0]

    def test_probes_absent_error(self, tmp_path):
        cfg = parse_config(AC_SMOKE)
        p = str(tmp_path / "noprobe.csv")
        run(cfg, p)
        with pytest.raises(UsageError, match="probes absent"):
            emit_plotdata([p], "probes", str(tmp_path / "x.csv"))

    def test_grid_mismatch_error(self, tmp_path):
        paths = self._runs(tmp_path, n=2)
        cfg = override(parse_config(Q_BMG_SMOKE), "env.lifetime", 200)
        p3 = str(tmp_path / "short.csv")
        run(cfg, p3)
        with pytest.raises(UsageError, match="mismatch"):
            emit_plotdata(paths + [p3], "schedule", str(tmp_path / "x.csv"))

    def test_freq_kind(self, tmp_path):
        method = override(parse_config(Q_BMG_SMOKE), "env.lifetime", 600)
        baseline = parse_config(Q_BASELINE_SMOKE)
        nonstationarity_sweep(method, baseline, [300, 600], seeds=2,
                              out_dir=str(tmp_path))
        rows = emit_plotdata([str(tmp_path / "freq_perseed.csv")], "freq",
                             str(tmp_path / "f.csv"))
        assert [r["period"] for r in rows] == [300, 600]
        assert all(r["n_seeds"] == 2 for r in rows)


class TestCLI:
    def test_run_command(self, tmp_path, capsys):
        cfg_path = tmp_path / "c.cfg"
        cfg_path.write_text(AC_SMOKE)
        rc = labcli.main(["run", "--config", str(cfg_path), "--out", str(tmp_path),
                          "--seed", "7"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "total_return" in out
        assert (tmp_path / "ac_seed7.csv").exists()

    def test_probe_command_forces_probes(self, tmp_path):
        cfg_path = tmp_path / "c.cfg"
        cfg_path.write_text(Q_BMG_SMOKE.replace("probes = true", "probes = false"))
        rc = labcli.main(["probe", "--config", str(cfg_path), "--out", str(tmp_path)])
        assert rc == 0
        header = open(tmp_path / "q-bmg-reward_seed1.csv").readline()
        assert "probe_high" in header

    def test_config_error_reported(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.cfg"
        cfg_path.write_text("[env]\nperiodd = 5\n")
        rc = labcli.main(["run", "--config", str(cfg_path), "--out", str(tmp_path)])
        assert rc == 2
        assert "unknown key" in capsys.readouterr().err

    def test_plotdata_command(self, tmp_path):
        cfg = parse_config(Q_BMG_SMOKE)
        p = str(tmp_path / "s.csv")
        run(cfg, p)
        rc = labcli.main(["plotdata", p, "--kind", "schedule",
                          "--out", str(tmp_path / "agg.csv")])
        assert rc == 0
        assert (tmp_path / "agg.csv").exists()
