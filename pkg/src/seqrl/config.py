"""Experiment configuration: TOML parsing with strict validation, presets
encoding the per-task batch sizes and budgets, and a writer that emits the
resolved config so every run directory can be reproduced exactly.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .envs import ENV_IDS, EnvSpec, make_env_spec
from .train import ALGORITHMS, StageConfig

STAGE_ORDER = ("expert", "sft", "rl")


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


@dataclass
class DiagnosticsConfig:
    value_traces: bool = False
    calibration: bool = False
    calibration_contexts: int = 64
    calibration_k: int = 16


@dataclass
class ExperimentConfig:
    seed: int
    env: EnvSpec
    stages: dict
    output_dir: str | None = None
    eval_episodes: int = 32
    dump_episodes: int = 2
    preset: str | None = None
    rl_init_from: str | None = None
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)


@dataclass
class BenchmarkConfig:
    envs: list
    algorithms: list
    seeds: list
    output_dir: str | None = None
    eval_episodes: int = 32
    overrides: dict = field(default_factory=dict)  # stage name -> key/value dict


# Budgets were calibrated on one CPU core during development; batch sizes and
# clip follow the per-task protocol (cartpole 64, mountain car 8, pendulum and
# lander 16 trajectories per update, eps = 0.2).
PRESETS = {
    "paper-cartpole": {
        "env": {"id": "precision_cartpole"},
        "expert": {"total_updates": 60, "batch_size": 64},
        "sft": {"expert_episodes": 512, "min_successes": 16},
        "rl": {"batch_size": 64, "total_updates": 120, "clip_eps": 0.2},
    },
    "paper-mountain-car": {
        "env": {"id": "mountain_car"},
        "expert": {"total_updates": 60, "batch_size": 16},
        "sft": {"expert_episodes": 256, "min_successes": 16},
        "rl": {"batch_size": 8, "total_updates": 120, "clip_eps": 0.2},
    },
    "paper-pendulum": {
        "env": {"id": "pendulum"},
        "expert": {"total_updates": 80, "batch_size": 16},
        "sft": {"expert_episodes": 256, "min_successes": 16},
        "rl": {"batch_size": 16, "total_updates": 120, "clip_eps": 0.2},
    },
    "paper-lander": {
        "env": {"id": "lunar_lander_lite"},
        "expert": {"total_updates": 120, "batch_size": 32},
        "sft": {"expert_episodes": 512, "min_successes": 16},
        "rl": {"batch_size": 16, "total_updates": 120, "clip_eps": 0.2},
    },
}

_TOP_KEYS = {
    "seed", "output_dir", "preset", "eval_episodes", "dump_episodes",
    "env", "expert", "sft", "rl", "diagnostics",
}
_ENV_KEYS = {"id", "horizon", "success_params", "physics"}
_STAGE_KEYS = {
    "expert": {
        "total_updates", "batch_size", "gamma", "lam", "clip_eps",
        "policy_lr", "critic_lr", "epochs", "minibatches", "critic_epochs", "hidden",
        "success_stop",
    },
    "sft": {
        "expert_episodes", "min_successes", "filter_threshold", "sft_epochs",
        "holdout_fraction", "patience", "sft_lr", "sft_minibatch", "hidden",
    },
    "rl": {
        "algorithm", "batch_size", "group_size", "clip_eps", "total_updates",
        "policy_lr", "critic_lr", "epochs", "minibatches", "critic_epochs",
        "hidden", "init_from", "entropy_coef",
    },
}
_DIAG_KEYS = {"value_traces", "calibration", "calibration_contexts", "calibration_k"}

_STAGE_DEFAULTS = {
    "expert": {"gamma": 0.99, "lam": 0.95, "total_updates": 60, "batch_size": 32},
    "sft": {},
    "rl": {"gamma": 1.0, "lam": 1.0},
}


def _require_type(value, types, where):
    if not isinstance(value, types) or isinstance(value, bool) and bool not in (
        types if isinstance(types, tuple) else (types,)
    ):
        raise ConfigError(f"{where}: expected {types}, got {type(value).__name__} ({value!r})")
    return value


def _check_keys(table: dict, allowed: set, where: str) -> None:
    for key in table:
        if key not in allowed:
            raise ConfigError(f"unknown key {where}.{key}" if where else f"unknown key {key}")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _build_stage(stage: str, table: dict) -> StageConfig:
    _check_keys(table, _STAGE_KEYS[stage], stage)
    values = dict(_STAGE_DEFAULTS[stage])
    values.update({k: v for k, v in table.items() if k != "init_from"})
    if "hidden" in values:
        hidden = values["hidden"]
        if not isinstance(hidden, list) or not all(isinstance(h, int) for h in hidden):
            raise ConfigError(f"{stage}.hidden must be a list of ints, got {hidden!r}")
        values["hidden"] = tuple(hidden)
    if stage == "rl":
        algo = values.get("algorithm", "sppo")
        if algo not in ALGORITHMS:
            raise ConfigError(
                f"rl.algorithm: unknown algorithm {algo!r}, expected one of {ALGORITHMS}"
            )
    cfg = StageConfig(stage=stage)
    valid_fields = {f.name for f in fields(StageConfig)}
    for key, value in values.items():
        if key not in valid_fields:
            raise ConfigError(f"unknown key {stage}.{key}")
        setattr(cfg, key, value)
    if stage != "rl":
        cfg.algorithm = "ppo_gae" if stage == "expert" else "sppo"
    # coerce: only group algorithms use groups
    if cfg.algorithm not in ("grpo", "rloo"):
        cfg.group_size = 1
    elif cfg.group_size < 2:
        raise ConfigError(f"rl.group_size must be >= 2 for {cfg.algorithm}, got {cfg.group_size}")
    for name in ("batch_size", "total_updates", "epochs", "minibatches", "critic_epochs"):
        if getattr(cfg, name) < (1 if name != "total_updates" else 0):
            raise ConfigError(f"{stage}.{name} must be positive, got {getattr(cfg, name)}")
    return cfg


def _parse_experiment_dict(raw: dict, path: str) -> ExperimentConfig:
    _check_keys(raw, _TOP_KEYS, "")
    preset_name = raw.get("preset")
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError(
                f"preset: unknown preset {preset_name!r}, expected one of {sorted(PRESETS)}"
            )
        raw = _merge(PRESETS[preset_name], raw)

    if "seed" not in raw:
        raise ConfigError(f"{path}: missing required key 'seed' (runs never seed from the clock)")
    seed = _require_type(raw["seed"], int, "seed")

    env_table = raw.get("env")
    if not isinstance(env_table, dict) or "id" not in env_table:
        raise ConfigError("env.id is required (directly or via a preset)")
    _check_keys(env_table, _ENV_KEYS, "env")
    env_id = env_table["id"]
    if env_id not in ENV_IDS:
        raise ConfigError(f"env.id: unknown environment {env_id!r}, expected one of {ENV_IDS}")
    horizon = env_table.get("horizon")
    if horizon is not None:
        _require_type(horizon, int, "env.horizon")
        if horizon < 1:
            raise ConfigError(f"env.horizon must be >= 1, got {horizon}")
    try:
        env = make_env_spec(
            env_id,
            reward_mode="sparse_outcome",
            horizon=horizon,
            success_params=env_table.get("success_params"),
            physics=env_table.get("physics"),
        )
    except ValueError as exc:
        raise ConfigError(f"env: {exc}") from exc

    stages = {}
    rl_init_from = None
    for stage in STAGE_ORDER:
        if stage in raw:
            table = raw[stage]
            if not isinstance(table, dict):
                raise ConfigError(f"{stage} must be a table")
            stages[stage] = _build_stage(stage, table)
            if stage == "rl" and "init_from" in table:
                rl_init_from = _require_type(table["init_from"], str, "rl.init_from")

    if "rl" in stages and "sft" not in stages and rl_init_from is None:
        raise ConfigError("rl stage needs an sft stage before it or rl.init_from")
    if "sft" in stages and "expert" not in stages:
        raise ConfigError("sft stage needs an expert stage before it")
    if not stages:
        raise ConfigError("no stages configured; add [expert], [sft], and/or [rl]")

    diag = DiagnosticsConfig()
    if "diagnostics" in raw:
        table = raw["diagnostics"]
        _check_keys(table, _DIAG_KEYS, "diagnostics")
        for key, value in table.items():
            setattr(diag, key, value)

    eval_episodes = _require_type(raw.get("eval_episodes", 32), int, "eval_episodes")
    if eval_episodes < 1:
        raise ConfigError(f"eval_episodes must be >= 1, got {eval_episodes}")
    dump_episodes = _require_type(raw.get("dump_episodes", 2), int, "dump_episodes")

    return ExperimentConfig(
        seed=seed,
        env=env,
        stages=stages,
        output_dir=raw.get("output_dir"),
        eval_episodes=eval_episodes,
        dump_episodes=dump_episodes,
        preset=preset_name,
        rl_init_from=rl_init_from,
        diagnostics=diag,
    )


def parse_config(path) -> ExperimentConfig:
    """Parse and validate an experiment TOML file; unknown keys are rejected."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return _parse_experiment_dict(raw, str(path))


def parse_benchmark(path) -> BenchmarkConfig:
    """Parse a benchmark matrix file: envs x algorithms x seeds."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"benchmark file {path} does not exist")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    allowed = {"envs", "algorithms", "seeds", "output_dir", "eval_episodes", "overrides"}
    _check_keys(raw, allowed, "")
    for key in ("envs", "algorithms", "seeds"):
        if key not in raw or not isinstance(raw[key], list) or not raw[key]:
            raise ConfigError(f"{key}: a nonempty list is required")
    for env_id in raw["envs"]:
        if env_id not in ENV_IDS:
            raise ConfigError(f"envs: unknown environment {env_id!r}")
    for algo in raw["algorithms"]:
        if algo not in ALGORITHMS:
            raise ConfigError(f"algorithms: unknown algorithm {algo!r}")
    for seed in raw["seeds"]:
        if not isinstance(seed, int):
            raise ConfigError(f"seeds: expected ints, got {seed!r}")
    overrides = raw.get("overrides", {})
    if not isinstance(overrides, dict):
        raise ConfigError("overrides must be a table of stage tables")
    for stage, table in overrides.items():
        if stage not in STAGE_ORDER:
            raise ConfigError(f"overrides.{stage}: unknown stage")
        if not isinstance(table, dict):
            raise ConfigError(f"overrides.{stage} must be a table")
        _check_keys(table, _STAGE_KEYS[stage], f"overrides.{stage}")
    return BenchmarkConfig(
        envs=list(raw["envs"]),
        algorithms=list(raw["algorithms"]),
        seeds=list(raw["seeds"]),
        output_dir=raw.get("output_dir"),
        eval_episodes=raw.get("eval_episodes", 32),
        overrides=overrides,
    )


# --- resolved-config emission -------------------------------------------------

def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise TypeError(f"cannot emit {value!r} as TOML")


def _stage_table(cfg: StageConfig, init_from=None) -> dict:
    keys = _STAGE_KEYS[cfg.stage]
    out = {}
    for key in sorted(keys):
        if key == "init_from":
            if init_from is not None:
                out[key] = init_from
            continue
        value = getattr(cfg, key)
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


def write_resolved_config(path, config: ExperimentConfig) -> None:
    """Emit the fully-resolved config; parse_config() round-trips it."""
    lines = [f"seed = {config.seed}"]
    if config.output_dir is not None:
        lines.append(f"output_dir = {_toml_scalar(config.output_dir)}")
    lines.append(f"eval_episodes = {config.eval_episodes}")
    lines.append(f"dump_episodes = {config.dump_episodes}")
    lines.append("")
    lines.append("[env]")
    lines.append(f"id = {_toml_scalar(config.env.env_id)}")
    lines.append(f"horizon = {config.env.horizon}")
    lines.append("")
    lines.append("[env.success_params]")
    for key in sorted(config.env.success_params):
        lines.append(f"{key} = {_toml_scalar(config.env.success_params[key])}")
    lines.append("")
    lines.append("[env.physics]")
    for key in sorted(config.env.physics):
        lines.append(f"{key} = {_toml_scalar(config.env.physics[key])}")
    for stage in STAGE_ORDER:
        if stage not in config.stages:
            continue
        lines.append("")
        lines.append(f"[{stage}]")
        init_from = config.rl_init_from if stage == "rl" else None
        table = _stage_table(config.stages[stage], init_from=init_from)
        for key in sorted(table):
            lines.append(f"{key} = {_toml_scalar(table[key])}")
    lines.append("")
    lines.append("[diagnostics]")
    diag = config.diagnostics
    lines.append(f"value_traces = {_toml_scalar(diag.value_traces)}")
    lines.append(f"calibration = {_toml_scalar(diag.calibration)}")
    lines.append(f"calibration_contexts = {diag.calibration_contexts}")
    lines.append(f"calibration_k = {diag.calibration_k}")
    Path(path).write_text("\n".join(lines) + "\n")


def git_blob_sha1(data: bytes) -> str:
    """Content hash the way git hashes a blob object."""
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()
