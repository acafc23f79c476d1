"""Run and sweep configuration.

Configs are INI-style text with nested sections and key-value pairs.
Unknown sections or keys are hard errors (they are almost always typos in
sweep grids). A parsed config resolves every default, so serializing and
re-parsing is lossless.

The candidate lists used for default sweep grids live here as module
constants; sweeps draw from them unless a grid explicitly overrides.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

# Candidate lists for hyperparameter sweeps (inner learners and meta-learners)
AC_ALPHA_ENT_CANDIDATES = (0.0, 0.1, 0.2, 0.4, 0.8)
AC_META_LR_CANDIDATES = (1e-3, 1e-4, 1e-5, 1e-6)
AC_ALPHA_OUTER_ENT_CANDIDATES = (0.0, 0.1)
AC_K_CANDIDATES = (1, 3, 6)
AC_L_CANDIDATES = (8, 16)
Q_LR_CANDIDATES = (3e-3, 1e-4, 3e-5, 1e-5)
Q_EPS_CANDIDATES = (0.3, 0.1, 0.03, 0.01)
Q_META_LR_CANDIDATES_NO_CONTEXT = (1e-2, 3e-3, 1e-3, 3e-4)
Q_META_LR_CANDIDATES_CONTEXT = (1e-3, 1e-4, 1e-5, 1e-6)
Q_L_CANDIDATES = (16, 32, 128)

ABLATION_ORDER = ("value", "reward", "td_error", "action_probs",
                  "grad_cosine", "prev_meta", "states")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class EnvCfg:
    kind: str = "two_colors"
    period: int = 100_000
    lifetime: int = 1_000_000
    n_mdps: int = 4
    width: int = 10
    height: int = 10


@dataclass(frozen=True)
class AgentCfg:
    kind: str = "ac"
    hidden: int = 256
    lr: float = 0.1
    gamma: float = 0.99
    lam: float = 0.9
    epsilon: float = 0.1      # q baseline exploration
    alpha_ent: float = 0.0    # ac baseline entropy weight
    alpha_l2: float = 0.0


@dataclass(frozen=True)
class MetaCfg:
    objective: str = "none"   # none | mg | bmg
    k: int = 1
    l: int = 8
    meta_lr: float = 1e-4
    alpha_outer_ent: float = 0.0
    tuned: tuple = ("alpha_ent",)
    meta_hidden: int = 64


@dataclass(frozen=True)
class ContextCfg:
    enabled: bool = False
    families: tuple = ("reward",)
    h: int = 10
    include_std: bool = False


@dataclass(frozen=True)
class RunCfg:
    seed: int = 0
    log_stride: int = 1
    log_updates: bool = False
    probes: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvCfg = field(default_factory=EnvCfg)
    agent: AgentCfg = field(default_factory=AgentCfg)
    meta: MetaCfg = field(default_factory=MetaCfg)
    context: ContextCfg = field(default_factory=ContextCfg)
    run: RunCfg = field(default_factory=RunCfg)

    def label(self) -> str:
        """Short method tag, e.g. "q-bmg-reward" or "ac"."""
        parts = [self.agent.kind]
        if self.meta.objective != "none":
            parts.append(self.meta.objective)
            if self.context.enabled:
                parts.append("-".join(self.context.families))
        return "-".join(parts)


_SECTIONS = {"env": EnvCfg, "agent": AgentCfg, "meta": MetaCfg,
             "context": ContextCfg, "run": RunCfg}
_TUPLE_KEYS = {("meta", "tuned"), ("context", "families")}


def _parse_value(section: str, key: str, raw: str, kind: type):
    raw = raw.strip()
    if (section, key) in _TUPLE_KEYS:
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    if kind is bool:
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    if kind is int:
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: expected an integer, got {raw!r}") from e
    if kind is float:
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: expected a number, got {raw!r}") from e
    return raw


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def parse_config(text: str, extra_sections: tuple = ()) -> ExperimentConfig:
    """Parse and validate a run config; unknown keys are errors."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unparsable config: {e}") from e
    parts = {}
    for section in cp.sections():
        if section in extra_sections:
            continue
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"unknown section [{section}]")
        known = {f.name: f.type for f in fields(cls)}
        types = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
        kwargs = {}
        for key, raw in cp.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            kwargs[key] = _parse_value(section, key, raw, types[key])
        parts[section] = cls(**kwargs)
    cfg = ExperimentConfig(**parts)
    validate_config(cfg)
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    """Write every resolved field; parse(serialize(cfg)) == cfg."""
    out = io.StringIO()
    for section, sub in (("env", cfg.env), ("agent", cfg.agent), ("meta", cfg.meta),
                         ("context", cfg.context), ("run", cfg.run)):
        out.write(f"[{section}]\n")
        for f in fields(sub):
            out.write(f"{f.name} = {_format_value(getattr(sub, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def validate_config(cfg: ExperimentConfig) -> None:
    """Reject inconsistent configs before any simulation starts."""
    from .agents import InnerHyper
    from .context import FeatureSpec
    from .metaopt import MetaSpec

    if cfg.env.kind not in ("two_colors", "switching"):
        raise ConfigError(f"unknown env kind {cfg.env.kind!r}")
    if cfg.env.period <= 0 or cfg.env.lifetime <= 0:
        raise ConfigError("env period and lifetime must be positive")
    if cfg.agent.kind not in ("ac", "q"):
        raise ConfigError(f"unknown agent kind {cfg.agent.kind!r}")
    if cfg.agent.hidden <= 0:
        raise ConfigError("agent hidden width must be positive")
    if cfg.meta.objective not in ("none", "mg", "bmg"):
        raise ConfigError(f"unknown objective {cfg.meta.objective!r}")
    try:
        InnerHyper(alpha_ent=cfg.agent.alpha_ent, alpha_l2=cfg.agent.alpha_l2,
                   epsilon=cfg.agent.epsilon, lr=cfg.agent.lr,
                   gamma=cfg.agent.gamma, lam=cfg.agent.lam).validate()
        if cfg.meta.objective != "none":
            MetaSpec(cfg.meta.objective, cfg.meta.k, cfg.meta.l, cfg.meta.meta_lr,
                     cfg.meta.alpha_outer_ent, cfg.meta.tuned,
                     cfg.meta.meta_hidden).validate(cfg.agent.kind)
        if cfg.context.enabled:
            if cfg.meta.objective == "none":
                raise ConfigError("context features need a meta objective")
            n_cells = 25 if cfg.env.kind == "two_colors" else cfg.env.width * cfg.env.height
            FeatureSpec(families=cfg.context.families, h=cfg.context.h,
                        include_std=cfg.context.include_std,
                        agent_kind=cfg.agent.kind, n_cells=n_cells,
                        n_meta=len(cfg.meta.tuned))
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if cfg.run.probes:
        if not cfg.context.enabled or cfg.context.families != ("reward",):
            raise ConfigError("probes need a reward-only context")
    if cfg.run.log_stride <= 0:
        raise ConfigError("log_stride must be positive")


def override(cfg: ExperimentConfig, dotted_key: str, value) -> ExperimentConfig:
    """Functional update via a dotted key such as "meta.meta_lr"."""
    section, _, key = dotted_key.partition(".")
    if section not in _SECTIONS or not key:
        raise ConfigError(f"bad override key {dotted_key!r}")
    sub = getattr(cfg, section)
    if not any(f.name == key for f in fields(sub)):
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    new_cfg = replace(cfg, **{section: replace(sub, **{key: value})})
    validate_config(new_cfg)
    return new_cfg


def default_grid(cfg: ExperimentConfig) -> dict:
    """Candidate grid for the config's method, drawn from the tables.

    Meta-gradient grids are the same size with and without context, and
    for MG vs BMG, so best-configuration comparisons stay fair.
    """
    agent = cfg.agent.kind
    obj = cfg.meta.objective
    if obj == "none":
        if agent == "ac":
            return {"agent.alpha_ent": list(AC_ALPHA_ENT_CANDIDATES)}
        return {"agent.lr": list(Q_LR_CANDIDATES),
                "agent.epsilon": list(Q_EPS_CANDIDATES)}
    if agent == "ac":
        if obj == "mg":
            return {"meta.meta_lr": list(AC_META_LR_CANDIDATES),
                    "meta.k": list(AC_K_CANDIDATES),
                    "meta.alpha_outer_ent": list(AC_ALPHA_OUTER_ENT_CANDIDATES)}
        return {"meta.meta_lr": list(AC_META_LR_CANDIDATES),
                "meta.k": list(AC_K_CANDIDATES),
                "meta.l": list(AC_L_CANDIDATES)}
    lrs = Q_META_LR_CANDIDATES_CONTEXT if cfg.context.enabled else Q_META_LR_CANDIDATES_NO_CONTEXT
    return {"meta.meta_lr": list(lrs), "meta.l": list(Q_L_CANDIDATES)}


@dataclass(frozen=True)
class SweepSpec:
    """Cartesian grid over a base config."""

    base: ExperimentConfig
    grid: dict
    seeds: int = 10

    def cells(self) -> list:
        """All grid configurations, in deterministic product order."""
        import itertools

        keys = list(self.grid.keys())
        out = []
        for combo in itertools.product(*(self.grid[k] for k in keys)):
            cfg = self.base
            for key, value in zip(keys, combo):
                cfg = override(cfg, key, value)
            out.append((dict(zip(keys, combo)), cfg))
        return out


def parse_sweep(text: str) -> SweepSpec:
    """A sweep file is a run config plus optional [sweep] and [grid] sections."""
    base = parse_config(text, extra_sections=("sweep", "grid"))
    cp = configparser.ConfigParser()
    cp.read_string(text)
    seeds = 10
    if cp.has_section("sweep"):
        for key, raw in cp.items("sweep"):
            if key == "seeds":
                seeds = int(raw)
            else:
                raise ConfigError(f"unknown key {key!r} in section [sweep]")
    if cp.has_section("grid"):
        grid = {}
        for dotted, raw in cp.items("grid"):
            section, _, key = dotted.partition(".")
            if section not in _SECTIONS or not key:
                raise ConfigError(f"bad grid key {dotted!r}")
            cls = _SECTIONS[section]
            if not any(f.name == key for f in fields(cls)):
                raise ConfigError(f"unknown grid key {dotted!r}")
            kind = type(getattr(cls(), key))
            grid[dotted] = [_parse_value(section, key, v, kind)
                            for v in raw.split(",") if v.strip()]
        if not grid:
            raise ConfigError("empty [grid] section")
    else:
        grid = default_grid(base)
    spec = SweepSpec(base=base, grid=grid, seeds=seeds)
    for overrides, _ in spec.cells():
        pass  # constructing every cell validates every combination
    return spec
