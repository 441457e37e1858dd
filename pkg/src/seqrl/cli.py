"""Command-line entry point: run one experiment, drive a benchmark matrix,
or summarize a results tree.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import logging
import math
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (
    BenchmarkConfig,
    ConfigError,
    ExperimentConfig,
    PRESETS,
    STAGE_ORDER,
    git_blob_sha1,
    parse_benchmark,
    parse_config,
    write_resolved_config,
)
from .diagnostics import (
    calibration_report,
    efficiency_curves,
    trace_values,
    write_curves_gnuplot,
    write_value_traces_csv,
)
from .envs import dense_spec, sparse_spec, write_episode_csv
from .seeding import rng_for
from .train import (
    EmptyFilterError,
    StageConfig,
    TrainedPolicy,
    behavior_cloning,
    expert_synthesis,
    load_policy_artifact,
    rl_finetune,
    run_episodes,
    sample_expert_trajectories,
    save_policy_artifact,
    success_filter,
)

log = logging.getLogger("seqrl")

PRESET_BY_ENV = {
    "precision_cartpole": "paper-cartpole",
    "mountain_car": "paper-mountain-car",
    "pendulum": "paper-pendulum",
    "lunar_lander_lite": "paper-lander",
}

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _resolve_out_dir(config_dir: str | None, cli_out: str | None) -> Path:
    """CLI --out beats the config; SEQRL_OUT_ROOT anchors relative paths."""
    chosen = cli_out if cli_out is not None else config_dir
    if chosen is None:
        raise ConfigError("no output directory: set output_dir in the config or pass --out")
    path = Path(chosen)
    root = os.environ.get("SEQRL_OUT_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _write_run_identity(out_dir: Path, config: ExperimentConfig) -> None:
    resolved = out_dir / "config.resolved.toml"
    write_resolved_config(resolved, replace(config, output_dir=str(out_dir)))
    blob = resolved.read_bytes()
    (out_dir / "inputs.sha").write_text(
        f"config_blob_sha1 = {git_blob_sha1(blob)}\nseed = {config.seed}\n"
    )


def run_pipeline(config: ExperimentConfig, out_dir: Path, resume: bool = False) -> None:
    """Execute the configured stage chain into out_dir; idempotent under resume."""
    done_marker = out_dir / "DONE"
    if resume and done_marker.exists():
        log.info("skipped (resume): %s is already complete", out_dir)
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_identity(out_dir, config)

    seed = config.seed
    env_sparse = sparse_spec(config.env)
    env_dense = dense_spec(config.env)

    expert = None
    if "expert" in config.stages:
        log.info("[%s] expert synthesis (dense rewards)", config.env.env_id)
        expert, expert_critic, _ = expert_synthesis(
            env_dense,
            config.stages["expert"],
            rng_for(seed, "expert"),
            out_dir=out_dir / "expert",
            eval_episodes=config.eval_episodes,
        )
        save_policy_artifact(out_dir / "expert" / "policy.ckpt", expert)
        save_policy_artifact(
            out_dir / "expert" / "critic.ckpt",
            TrainedPolicy(params=expert_critic, stage="expert", info={"role": "critic"}),
        )
        _dump_expert_episodes(config, expert, env_dense, out_dir / "expert" / "episodes")

    sft = None
    if "sft" in config.stages:
        if expert is None:
            raise ConfigError("sft stage configured without an expert stage")
        log.info("[%s] behavior cloning on filtered successes", config.env.env_id)
        sft = _run_sft_stage(config, expert, env_dense, env_sparse, out_dir / "sft")

    if "rl" in config.stages:
        if sft is None:
            if config.rl_init_from is None:
                raise ConfigError("rl stage needs an sft stage or rl.init_from")
            sft = load_policy_artifact(config.rl_init_from)
        rl_cfg = config.stages["rl"]
        log.info(
            "[%s] sparse-outcome fine-tuning with %s", config.env.env_id, rl_cfg.algorithm
        )
        rl_dir = out_dir / "rl"
        policy, critic, rows = rl_finetune(
            sft,
            env_sparse,
            rl_cfg,
            rng_for(seed, "rl"),
            out_dir=rl_dir,
            eval_episodes=config.eval_episodes,
            eval_seed=seed,
        )
        save_policy_artifact(rl_dir / "policy.ckpt", policy)
        if critic is not None:
            save_policy_artifact(
                rl_dir / "critic.ckpt",
                TrainedPolicy(params=critic, stage="rl", info={"role": "critic"}),
            )
        _run_diagnostics(config, policy, critic, env_sparse, rl_dir)
        if rows:
            log.info(
                "[%s] %s final eval success %.3f",
                config.env.env_id,
                rl_cfg.algorithm,
                rows[-1].eval_success_rate,
            )

    done_marker.write_text("ok\n")


def _dump_expert_episodes(config, expert, env_dense, episodes_dir: Path) -> None:
    if config.dump_episodes <= 0:
        return
    episodes_dir.mkdir(parents=True, exist_ok=True)
    rngs = rng_for(config.seed, "dump").spawn(config.dump_episodes)
    records = run_episodes(
        expert.params, env_dense, rngs=rngs, keep_states=True
    )
    for i, rec in enumerate(records):
        write_episode_csv(
            episodes_dir / f"ep_{i:03d}.csv", env_dense, rec.states, rec.actions, rec.rewards
        )


def _run_sft_stage(config, expert, env_dense, env_sparse, sft_dir: Path) -> TrainedPolicy:
    sft_cfg = config.stages["sft"]
    seed = config.seed
    trajs = []
    successes = 0
    for attempt in range(5):
        trajs.extend(
            sample_expert_trajectories(
                expert,
                env_dense,
                sft_cfg.expert_episodes,
                rng_for(seed, "sft-sample", attempt),
            )
        )
        successes = sum(t.R for t in trajs)
        if successes >= sft_cfg.min_successes:
            break
    if successes == 0:
        raise EmptyFilterError(
            f"expert produced 0/{len(trajs)} successful trajectories to clone"
        )
    sft = behavior_cloning(
        trajs,
        success_filter(sft_cfg.filter_threshold),
        rng_for(seed, "sft"),
        action_count=env_sparse.action_count(),
        config=sft_cfg,
    )
    # record solvability of the cloned policy on the sparse task
    sample_rngs = rng_for(seed, "sft-eval").spawn(64)
    sampled = run_episodes(sft.params, env_sparse, rngs=sample_rngs)
    sampled_rate = float(np.mean([r.outcome_R for r in sampled]))
    sft.info["sampled_success"] = sampled_rate
    sft.info["expert_successes"] = int(successes)
    if not 0.0 < sampled_rate < 1.0:
        log.warning(
            "SFT policy sparse success is %.3f; fine-tuning expects it strictly inside (0, 1)",
            sampled_rate,
        )
    sft_dir.mkdir(parents=True, exist_ok=True)
    save_policy_artifact(sft_dir / "policy.ckpt", sft)
    return sft


def _run_diagnostics(config, policy, critic, env_sparse, rl_dir: Path) -> None:
    diag = config.diagnostics
    if critic is None or not (diag.value_traces or diag.calibration):
        return
    if diag.value_traces:
        rngs = rng_for(config.seed, "traces").spawn(16)
        records = run_episodes(policy.params, env_sparse, rngs=rngs)
        logp_stub = [np.zeros(len(r.actions)) for r in records]
        from .advantage import Trajectory

        trajs = [
            Trajectory(
                initial_obs=rec.initial_obs,
                observations=rec.observations,
                actions=rec.actions,
                behavior_log_probs=lp,
                rewards=rec.rewards,
                R=rec.outcome_R,
            )
            for rec, lp in zip(records, logp_stub)
        ]
        write_value_traces_csv(rl_dir / "values.csv", trace_values(critic, trajs))
    if diag.calibration and config.stages["rl"].algorithm == "sppo":
        calibration_report(
            critic,
            env_sparse,
            policy.params,
            diag.calibration_contexts,
            diag.calibration_k,
            rng_for(config.seed, "calibration"),
            out_dir=rl_dir / "calibration",
        )


# --- benchmark driver -----------------------------------------------------------

def _cell_config(bench: BenchmarkConfig, env_id: str, algorithm: str, seed: int,
                 stages: tuple, init_from: str | None = None) -> ExperimentConfig:
    raw: dict = {"seed": seed, "preset": PRESET_BY_ENV[env_id],
                 "eval_episodes": bench.eval_episodes}
    preset = PRESETS[PRESET_BY_ENV[env_id]]
    raw["env"] = {"id": env_id}
    for stage in stages:
        table = dict(preset.get(stage, {}))
        table.update(bench.overrides.get(stage, {}))
        if stage == "rl":
            table["algorithm"] = algorithm
            if init_from is not None:
                table["init_from"] = init_from
        raw[stage] = table
    from .config import _parse_experiment_dict

    return _parse_experiment_dict(raw, "<benchmark>")


def _run_shared_task(args) -> tuple[str, str | None]:
    bench, env_id, seed, shared_dir, resume = args
    try:
        config = _cell_config(bench, env_id, "sppo", seed, stages=("expert", "sft"))
        run_pipeline(config, shared_dir, resume=resume)
        return (str(shared_dir), None)
    except Exception:
        return (str(shared_dir), traceback.format_exc())


def _run_cell_task(args) -> tuple[str, str | None]:
    bench, env_id, algorithm, seed, cell_dir, sft_path, resume = args
    try:
        config = _cell_config(
            bench, env_id, algorithm, seed, stages=("rl",), init_from=str(sft_path)
        )
        run_pipeline(config, cell_dir, resume=resume)
        return (str(cell_dir), None)
    except Exception:
        return (str(cell_dir), traceback.format_exc())


def _run_tasks(task_fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [task_fn(t) for t in tasks]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(task_fn, tasks))


def run_benchmark(bench: BenchmarkConfig, out_root: Path, resume: bool = False,
                  jobs: int = 1) -> int:
    """envs x algorithms x seeds; shared expert+SFT per (env, seed), one results
    directory per cell, then merged efficiency tables. Returns failure count."""
    failures = 0

    shared_tasks = []
    for env_id in bench.envs:
        for seed in bench.seeds:
            shared_dir = out_root / env_id / f"seed{seed}" / "shared"
            shared_tasks.append((bench, env_id, seed, shared_dir, resume))
    shared_ok = {}
    for (where, error) in _run_tasks(_run_shared_task, shared_tasks, jobs):
        shared_ok[where] = error is None
        if error is not None:
            failures += 1
            Path(where).mkdir(parents=True, exist_ok=True)
            (Path(where) / "FAILED").write_text(error)
            log.error("shared stage failed: %s", where)

    cell_tasks = []
    for env_id in bench.envs:
        for seed in bench.seeds:
            shared_dir = out_root / env_id / f"seed{seed}" / "shared"
            sft_path = shared_dir / "sft" / "policy.ckpt"
            if not shared_ok.get(str(shared_dir), False):
                continue
            for algorithm in bench.algorithms:
                cell_dir = out_root / env_id / f"seed{seed}" / algorithm
                cell_tasks.append(
                    (bench, env_id, algorithm, seed, cell_dir, sft_path, resume)
                )
    for (where, error) in _run_tasks(_run_cell_task, cell_tasks, jobs):
        if error is not None:
            failures += 1
            Path(where).mkdir(parents=True, exist_ok=True)
            (Path(where) / "FAILED").write_text(error)
            log.error("cell failed: %s", where)

    summary_dir = out_root / "summary"
    summary_dir.mkdir(parents=True, exist_ok=True)
    for env_id in bench.envs:
        curves = []
        labels = []
        for seed in bench.seeds:
            for algorithm in bench.algorithms:
                curve = out_root / env_id / f"seed{seed}" / algorithm / "rl" / "curve.csv"
                if curve.exists():
                    curves.append(str(curve))
                    labels.append(f"{algorithm}-seed{seed}")
        if curves:
            efficiency_curves(
                curves, labels=labels, out_path=summary_dir / f"curves_{env_id}.csv"
            )
            write_curves_gnuplot(summary_dir / f"curves_{env_id}.gp", curves)
    text, rows = report(out_root)
    (summary_dir / "report.txt").write_text(text)
    _write_report_csv(summary_dir / "report.csv", rows)
    return failures


# --- report -----------------------------------------------------------------------

def _collect_cells(tree: Path):
    cells = []
    for env_dir in sorted(p for p in tree.iterdir() if p.is_dir() and p.name != "summary"):
        for seed_dir in sorted(env_dir.glob("seed*")):
            for algo_dir in sorted(p for p in seed_dir.iterdir() if p.is_dir()):
                if algo_dir.name == "shared":
                    continue
                cells.append((env_dir.name, seed_dir.name, algo_dir.name, algo_dir))
    return cells


def report(tree, success_threshold: float = 0.8) -> tuple[str, list]:
    """Per-cell finals/bests and per-(env, algorithm) aggregates across seeds."""
    tree = Path(tree)
    if not tree.exists():
        raise ConfigError(f"results tree {tree} does not exist")
    cells = _collect_cells(tree)
    if not cells:
        raise ConfigError(f"results tree {tree} contains no benchmark cells")

    rows = []
    for env_id, seed_name, algorithm, cell_dir in cells:
        curve = cell_dir / "rl" / "curve.csv"
        if not curve.exists():
            rows.append(
                {
                    "env": env_id, "algorithm": algorithm, "seed": seed_name,
                    "status": "incomplete", "final_success": math.nan,
                    "best_success": math.nan, "updates_to_threshold": "not reached",
                }
            )
            continue
        _, summaries = efficiency_curves([str(curve)], labels=[algorithm],
                                         success_threshold=success_threshold)
        s = summaries[0]
        rows.append(
            {
                "env": env_id, "algorithm": algorithm, "seed": seed_name,
                "status": "ok", "final_success": s["final_success"],
                "best_success": s["best_success"],
                "updates_to_threshold": s["updates_to_threshold"],
            }
        )

    lines = [
        f"{'env':<22}{'algorithm':<10}{'seeds':>6}{'final (mean)':>14}"
        f"{'final range':>16}{'best (mean)':>13}{'to>=%.2f' % success_threshold:>10}"
    ]
    combos = sorted({(r["env"], r["algorithm"]) for r in rows})
    for env_id, algorithm in combos:
        group = [r for r in rows if r["env"] == env_id and r["algorithm"] == algorithm]
        complete = [r for r in group if r["status"] == "ok"]
        n_inc = len(group) - len(complete)
        if complete:
            finals = [r["final_success"] for r in complete]
            bests = [r["best_success"] for r in complete]
            reached = [
                r["updates_to_threshold"]
                for r in complete
                if r["updates_to_threshold"] != "not reached"
            ]
            to_thresh = f"{min(reached)}" if reached else "not reached"
            lines.append(
                f"{env_id:<22}{algorithm:<10}{len(complete):>6}"
                f"{float(np.mean(finals)):>14.3f}"
                f"{'[%.2f, %.2f]' % (min(finals), max(finals)):>16}"
                f"{float(np.mean(bests)):>13.3f}{to_thresh:>10}"
            )
        if n_inc:
            lines.append(f"{env_id:<22}{algorithm:<10}  {n_inc} incomplete cell(s)")
    return "\n".join(lines) + "\n", rows


def _write_report_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["env", "algorithm", "seed", "status", "final_success", "best_success",
             "updates_to_threshold"]
        )
        for r in rows:
            writer.writerow(
                [r["env"], r["algorithm"], r["seed"], r["status"],
                 repr(float(r["final_success"])), repr(float(r["best_success"])),
                 r["updates_to_threshold"]]
            )


# --- argparse ------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqrl",
        description="Sparse binary-outcome RL experiments on classic-control tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config", help="path to an experiment TOML file")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default=None, help="override the output directory")
    p_run.add_argument("--resume", action="store_true", help="skip if already complete")

    p_bench = sub.add_parser("benchmark", help="run an envs x algorithms x seeds matrix")
    p_bench.add_argument("matrix", help="path to a benchmark TOML file")
    p_bench.add_argument("--out", default=None, help="override the output root")
    p_bench.add_argument("--resume", action="store_true", help="skip completed cells")
    p_bench.add_argument("--jobs", type=int, default=1, help="parallel cells (processes)")

    p_report = sub.add_parser("report", help="summarize a benchmark results tree")
    p_report.add_argument("tree", help="benchmark output root")
    p_report.add_argument("--threshold", type=float, default=0.8,
                          help="success threshold for time-to-threshold")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = parse_config(args.config)
            if args.seed is not None:
                config.seed = args.seed
            out_dir = _resolve_out_dir(config.output_dir, args.out)
            try:
                run_pipeline(config, out_dir, resume=args.resume)
            except Exception:
                log.error("run failed:\n%s", traceback.format_exc())
                return EXIT_RUNTIME
            return EXIT_OK
        if args.command == "benchmark":
            bench = parse_benchmark(args.matrix)
            out_root = _resolve_out_dir(bench.output_dir, args.out)
            failures = run_benchmark(bench, out_root, resume=args.resume, jobs=args.jobs)
            if failures:
                log.error("%d benchmark cell(s) failed", failures)
                return EXIT_RUNTIME
            return EXIT_OK
        if args.command == "report":
            text, _ = report(args.tree, success_threshold=args.threshold)
            print(text, end="")
            return EXIT_OK
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
