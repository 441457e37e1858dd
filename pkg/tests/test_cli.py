import math
import os
from pathlib import Path

import numpy as np
import pytest

from seqrl.cli import main, report, run_pipeline, _resolve_out_dir
from seqrl.config import (
    ConfigError,
    git_blob_sha1,
    parse_benchmark,
    parse_config,
    write_resolved_config,
)
from seqrl.train import CurveRow, write_curve_csv

MINIMAL = """
seed = 7
[env]
id = "precision_cartpole"
[expert]
total_updates = 0
"""


def write_cfg(tmp_path, text, name="exp.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


# --- parsing ------------------------------------------------------------------

def test_minimal_config_gets_documented_defaults(tmp_path):
    cfg = parse_config(write_cfg(tmp_path, MINIMAL))
    assert cfg.seed == 7
    assert cfg.env.env_id == "precision_cartpole"
    assert cfg.env.horizon == 200
    assert cfg.eval_episodes == 32
    assert cfg.stages["expert"].gamma == 0.99
    assert cfg.stages["expert"].lam == 0.95
    assert cfg.stages["expert"].clip_eps == 0.2


def test_missing_seed_is_rejected(tmp_path):
    path = write_cfg(tmp_path, '[env]\nid = "pendulum"\n[expert]\ntotal_updates = 1\n')
    with pytest.raises(ConfigError, match="seed"):
        parse_config(path)


def test_unknown_key_is_rejected_with_field_name(tmp_path):
    path = write_cfg(tmp_path, MINIMAL + "\n[rl]\nalgorithm = 'sppo'\nlearning = 3\n")
    with pytest.raises(ConfigError, match="rl.learning"):
        parse_config(path)


def test_unknown_top_level_key_rejected(tmp_path):
    path = write_cfg(tmp_path, "speed = 3\n" + MINIMAL)
    with pytest.raises(ConfigError, match="speed"):
        parse_config(path)


def test_misspelled_algorithm_rejected_naming_field(tmp_path):
    path = write_cfg(
        tmp_path, MINIMAL + "\n[sft]\n[rl]\nalgorithm = 'spo'\n"
    )
    with pytest.raises(ConfigError, match="rl.algorithm"):
        parse_config(path)


def test_unknown_env_rejected(tmp_path):
    path = write_cfg(tmp_path, 'seed = 1\n[env]\nid = "hopper"\n[expert]\n')
    with pytest.raises(ConfigError, match="env.id"):
        parse_config(path)


def test_bad_horizon_rejected(tmp_path):
    path = write_cfg(
        tmp_path, 'seed = 1\n[env]\nid = "pendulum"\nhorizon = 100\n[expert]\n'
    )
    with pytest.raises(ConfigError, match="fixed at 1000"):
        parse_config(path)
    path0 = write_cfg(
        tmp_path, 'seed = 1\n[env]\nid = "pendulum"\nhorizon = 0\n[expert]\n', "h0.toml"
    )
    with pytest.raises(ConfigError, match="horizon"):
        parse_config(path0)


def test_rl_without_sft_or_init_rejected(tmp_path):
    path = write_cfg(tmp_path, 'seed = 1\n[env]\nid = "pendulum"\n[rl]\nalgorithm = "sppo"\n')
    with pytest.raises(ConfigError, match="sft"):
        parse_config(path)


def test_paper_cartpole_preset_values(tmp_path):
    path = write_cfg(tmp_path, 'seed = 3\npreset = "paper-cartpole"\n')
    cfg = parse_config(path)
    assert cfg.env.env_id == "precision_cartpole"
    assert cfg.env.horizon == 200
    assert cfg.stages["rl"].batch_size == 64
    assert cfg.stages["rl"].clip_eps == 0.2
    assert cfg.stages["rl"].algorithm == "sppo"
    assert set(cfg.stages) == {"expert", "sft", "rl"}


def test_preset_file_keys_win_over_preset(tmp_path):
    path = write_cfg(
        tmp_path,
        'seed = 3\npreset = "paper-cartpole"\n[rl]\nbatch_size = 16\n',
    )
    cfg = parse_config(path)
    assert cfg.stages["rl"].batch_size == 16
    assert cfg.stages["rl"].clip_eps == 0.2  # untouched preset value survives


def test_group_size_validation_for_group_algorithms(tmp_path):
    path = write_cfg(
        tmp_path,
        MINIMAL + "\n[sft]\n[rl]\nalgorithm = 'grpo'\ngroup_size = 1\n",
    )
    with pytest.raises(ConfigError, match="group_size"):
        parse_config(path)


def test_resolved_config_roundtrip(tmp_path):
    src = write_cfg(
        tmp_path,
        'seed = 11\npreset = "paper-mountain-car"\neval_episodes = 8\n'
        "[rl]\nalgorithm = 'grpo'\ngroup_size = 4\n",
    )
    cfg = parse_config(src)
    out = tmp_path / "resolved.toml"
    write_resolved_config(out, cfg)
    reparsed = parse_config(out)
    assert reparsed.seed == cfg.seed
    assert reparsed.env == cfg.env
    assert reparsed.eval_episodes == cfg.eval_episodes
    assert reparsed.stages.keys() == cfg.stages.keys()
    for name in cfg.stages:
        assert reparsed.stages[name] == cfg.stages[name]


def test_benchmark_parse_and_validation(tmp_path):
    good = write_cfg(
        tmp_path,
        'envs = ["precision_cartpole"]\nalgorithms = ["sppo", "ppo_gae"]\nseeds = [1, 2]\n'
        "[overrides.rl]\ntotal_updates = 3\n",
        "bench.toml",
    )
    bench = parse_benchmark(good)
    assert bench.envs == ["precision_cartpole"]
    assert bench.overrides["rl"]["total_updates"] == 3
    bad = write_cfg(tmp_path, 'envs = ["nope"]\nalgorithms = ["sppo"]\nseeds = [1]\n', "b2.toml")
    with pytest.raises(ConfigError, match="unknown environment"):
        parse_benchmark(bad)


def test_git_blob_sha1_matches_git_convention():
    # sha1 of "blob 0\0" -- the hash git gives an empty file
    assert git_blob_sha1(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_out_dir_env_var_roots_relative_paths(monkeypatch, tmp_path):
    monkeypatch.setenv("SEQRL_OUT_ROOT", str(tmp_path / "root"))
    assert _resolve_out_dir("runs/x", None) == tmp_path / "root" / "runs" / "x"
    absolute = str(tmp_path / "abs")
    assert _resolve_out_dir(absolute, None) == Path(absolute)
    monkeypatch.delenv("SEQRL_OUT_ROOT")
    assert _resolve_out_dir("runs/x", None) == Path("runs/x")
    with pytest.raises(ConfigError, match="output"):
        _resolve_out_dir(None, None)


# --- exit codes ------------------------------------------------------------------

def test_exit_code_config_error(tmp_path):
    bad = write_cfg(tmp_path, "seed = 'nope'\n[env]\nid='pendulum'\n[expert]\n")
    assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_exit_code_missing_file(tmp_path):
    assert main(["run", str(tmp_path / "absent.toml")]) == 2


def test_exit_code_runtime_failure(tmp_path):
    # zero-budget expert cannot supply sft with successes -> runtime error
    cfg = write_cfg(
        tmp_path,
        'seed = 5\n[env]\nid = "precision_cartpole"\n'
        "[expert]\ntotal_updates = 0\n[sft]\nexpert_episodes = 8\n",
    )
    assert main(["run", str(cfg), "--out", str(tmp_path / "out")]) == 3


def test_exit_code_success_minimal_run(tmp_path):
    cfg = write_cfg(tmp_path, MINIMAL)
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--out", str(out)]) == 0
    assert (out / "DONE").exists()
    assert (out / "config.resolved.toml").exists()
    sha_text = (out / "inputs.sha").read_text()
    assert "config_blob_sha1 = " in sha_text and "seed = 7" in sha_text
    blob = (out / "config.resolved.toml").read_bytes()
    assert git_blob_sha1(blob) in sha_text


def test_seed_override_changes_recorded_seed(tmp_path):
    cfg = write_cfg(tmp_path, MINIMAL)
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--out", str(out), "--seed", "99"]) == 0
    assert "seed = 99" in (out / "inputs.sha").read_text()


# --- report on synthetic trees -------------------------------------------------------

def synth_cell(tree, env, seed, algo, finals):
    cell = tree / env / f"seed{seed}" / algo / "rl"
    cell.mkdir(parents=True)
    rows = [
        CurveRow(i, (i + 1) * 4, rate, 0.0, 0.0, 0.5, float(i)) for i, rate in enumerate(finals)
    ]
    write_curve_csv(cell / "curve.csv", rows)


def test_report_aggregates_mean_and_range(tmp_path):
    tree = tmp_path / "tree"
    synth_cell(tree, "mountain_car", 1, "sppo", [0.1, 0.9])
    synth_cell(tree, "mountain_car", 2, "sppo", [0.1, 0.8])
    synth_cell(tree, "mountain_car", 3, "sppo", [0.2, 1.0])
    text, rows = report(tree)
    assert "mountain_car" in text
    line = [l for l in text.splitlines() if l.startswith("mountain_car")][0]
    assert "0.900" in line  # mean of (0.9, 0.8, 1.0)
    assert "[0.80, 1.00]" in line
    finals = sorted(r["final_success"] for r in rows)
    assert finals == [0.8, 0.9, 1.0]


def test_report_flags_incomplete_cells(tmp_path):
    tree = tmp_path / "tree"
    synth_cell(tree, "pendulum", 1, "sppo", [0.5])
    empty = tree / "pendulum" / "seed2" / "sppo"
    empty.mkdir(parents=True)
    text, rows = report(tree)
    assert "incomplete" in text
    statuses = {r["seed"]: r["status"] for r in rows}
    assert statuses == {"seed1": "ok", "seed2": "incomplete"}


def test_report_empty_tree_errors(tmp_path):
    empty = tmp_path / "tree"
    empty.mkdir()
    with pytest.raises(ConfigError, match="no benchmark cells"):
        report(empty)


def test_report_command_exit_codes(tmp_path):
    tree = tmp_path / "tree"
    synth_cell(tree, "pendulum", 1, "sppo", [0.5, 0.9])
    assert main(["report", str(tree)]) == 0
    assert main(["report", str(tmp_path / "missing")]) == 2


# --- end-to-end pipeline and benchmark ------------------------------------------------

FAST_PIPELINE = """
seed = 31
[env]
id = "precision_cartpole"
[expert]
total_updates = 25
batch_size = 48
[sft]
expert_episodes = 192
min_successes = 2
sft_epochs = 25
[rl]
algorithm = "sppo"
total_updates = 3
batch_size = 8
[diagnostics]
value_traces = true
"""


@pytest.mark.slow
def test_run_pipeline_end_to_end_outputs(tmp_path):
    cfg = write_cfg(tmp_path, FAST_PIPELINE)
    out = tmp_path / "run"
    assert main(["run", str(cfg), "--out", str(out)]) == 0
    assert (out / "expert" / "curve.csv").exists()
    assert (out / "expert" / "policy.ckpt").exists()
    assert (out / "expert" / "episodes" / "ep_000.csv").exists()
    assert (out / "sft" / "policy.ckpt.meta.json").exists()
    assert (out / "rl" / "curve.csv").exists()
    assert (out / "rl" / "timing.csv").exists()
    assert (out / "rl" / "policy.ckpt").exists()
    assert (out / "rl" / "values.csv").exists()
    assert (out / "DONE").exists()
    # resume skips a finished run without touching outputs
    before = (out / "rl" / "curve.csv").read_bytes()
    assert main(["run", str(cfg), "--out", str(out), "--resume"]) == 0
    assert (out / "rl" / "curve.csv").read_bytes() == before


@pytest.mark.slow
def test_benchmark_two_algorithms_builds_cells_and_summary(tmp_path):
    matrix = write_cfg(
        tmp_path,
        'envs = ["precision_cartpole"]\nalgorithms = ["sppo", "ppo_gae"]\nseeds = [31]\n'
        "eval_episodes = 8\n"
        "[overrides.expert]\ntotal_updates = 25\nbatch_size = 48\n"
        "[overrides.sft]\nexpert_episodes = 192\nmin_successes = 2\nsft_epochs = 25\n"
        "[overrides.rl]\ntotal_updates = 3\nbatch_size = 8\n",
        "bench.toml",
    )
    out = tmp_path / "bench"
    assert main(["benchmark", str(matrix), "--out", str(out)]) == 0
    base = out / "precision_cartpole" / "seed31"
    assert (base / "shared" / "sft" / "policy.ckpt").exists()
    for algo in ("sppo", "ppo_gae"):
        assert (base / algo / "rl" / "curve.csv").exists()
        assert (base / algo / "DONE").exists()
    assert (out / "summary" / "curves_precision_cartpole.csv").exists()
    assert (out / "summary" / "report.txt").exists()
    text, rows = report(out)
    assert len(rows) == 2
    # resume: a second invocation reruns nothing and succeeds
    assert main(["benchmark", str(matrix), "--out", str(out), "--resume"]) == 0
