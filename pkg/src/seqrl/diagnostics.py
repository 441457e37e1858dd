"""Analysis outputs: per-step critic value traces, critic-vs-pass-rate
calibration with rank statistics, and cross-run efficiency tables.

Plot data is emitted as CSV plus a gnuplot script; nothing here renders
images.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as scipy_stats

from .advantage import critic_values
from .envs import EnvSpec, env_reset, observe
from .nets import MlpParams
from .train import CURVE_COLUMNS, run_episodes


@dataclass
class ValueTrace:
    """Critic values along one trajectory, labeled by its outcome."""

    trajectory_id: int
    R: int
    values: np.ndarray


@dataclass
class CalibrationRecord:
    """One context: critic prediction vs empirical pass rate over k rollouts."""

    context_id: int
    predicted: float
    empirical: float
    k: int


class SchemaError(ValueError):
    """A learning-curve CSV does not match the expected schema."""


def trace_values(token_critic: MlpParams, trajs) -> list[ValueTrace]:
    """Evaluate the critic on every step observation of every trajectory."""
    traces = []
    for i, traj in enumerate(trajs):
        values = critic_values(token_critic, traj.observations)
        traces.append(ValueTrace(trajectory_id=i, R=traj.R, values=values))
    return traces


def write_value_traces_csv(path, traces) -> None:
    """Long format: trajectory_id, step, value, R."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory_id", "step", "value", "R"])
        for trace in traces:
            for step, value in enumerate(trace.values):
                writer.writerow([trace.trajectory_id, step, repr(float(value)), trace.R])


def _correlations(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(Pearson, Spearman); NaN sentinels when either variable is constant."""
    if len(x) < 2 or np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return math.nan, math.nan
    pearson = float(scipy_stats.pearsonr(x, y).statistic)
    spearman = float(scipy_stats.spearmanr(x, y).statistic)
    return pearson, spearman


def calibration_report(
    sppo_critic: MlpParams,
    spec: EnvSpec,
    policy: MlpParams,
    contexts: int,
    k: int,
    rng,
    out_dir=None,
):
    """Critic prediction vs avg@k empirical pass rate over sampled contexts.

    For each context: one critic query on the initial observation and k
    stochastic policy rollouts. Returns (records, pearson, spearman); both
    correlations are NaN when either variable has zero variance.
    """
    if contexts < 2:
        raise ValueError(f"calibration needs >= 2 contexts, got {contexts}")
    if k < 1:
        raise ValueError(f"avg@k needs k >= 1, got {k}")
    streams = rng.spawn(contexts)
    records = []
    for context_id in range(contexts):
        ctx_rng = streams[context_id]
        state0 = env_reset(spec, ctx_rng)
        predicted = float(critic_values(sppo_critic, observe(spec, state0)[None, :])[0])
        episode_rngs = ctx_rng.spawn(k)
        episodes = run_episodes(
            policy, spec, rngs=episode_rngs, initial_states=[state0] * k
        )
        empirical = float(np.mean([e.outcome_R for e in episodes]))
        records.append(
            CalibrationRecord(
                context_id=context_id, predicted=predicted, empirical=empirical, k=k
            )
        )

    predicted = np.array([r.predicted for r in records])
    empirical = np.array([r.empirical for r in records])
    pearson, spearman = _correlations(predicted, empirical)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "calibration_scatter.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["context_id", "predicted", "empirical", "k"])
            for r in records:
                writer.writerow([r.context_id, repr(r.predicted), repr(r.empirical), r.k])
        _write_histograms(out / "calibration_hist.csv", predicted, empirical)
        summary = {
            "pearson": pearson,
            "spearman": spearman,
            "n": contexts,
            "k": k,
        }
        lines = [f"{key} = {value!r}" for key, value in summary.items()]
        (out / "calibration_summary.txt").write_text("\n".join(lines) + "\n")
        _write_calibration_gnuplot(out / "calibration.gp")
    return records, pearson, spearman


def _write_histograms(path, predicted: np.ndarray, empirical: np.ndarray) -> None:
    """Marginal histograms over [0, 1] with 10 uniform bins."""
    edges = np.linspace(0.0, 1.0, 11)
    pred_counts, _ = np.histogram(predicted, bins=edges)
    emp_counts, _ = np.histogram(empirical, bins=edges)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "predicted_count", "empirical_count"])
        for i in range(10):
            writer.writerow(
                [repr(edges[i]), repr(edges[i + 1]), int(pred_counts[i]), int(emp_counts[i])]
            )


def _write_calibration_gnuplot(path) -> None:
    script = """\
set datafile separator ','
set key autotitle columnhead
set xlabel 'empirical pass rate (avg@k)'
set ylabel 'critic prediction'
set xrange [0:1]
set yrange [0:1]
plot 'calibration_scatter.csv' using 3:2 with points pt 7 title 'contexts', x with lines lc 'gray' title ''
"""
    Path(path).write_text(script)


def write_curves_gnuplot(path, csv_names) -> None:
    """Success-vs-update plot command covering the given curve CSVs."""
    plots = ", ".join(
        f"'{name}' using 1:3 with lines title '{Path(name).stem}'" for name in csv_names
    )
    script = (
        "set datafile separator ','\n"
        "set key autotitle columnhead\n"
        "set xlabel 'update'\n"
        "set ylabel 'eval success rate'\n"
        f"plot {plots}\n"
    )
    Path(path).write_text(script)


def _read_curve_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path} is empty")
        expected = list(CURVE_COLUMNS)
        if header != expected:
            for got, want in zip(header, expected):
                if got != want:
                    raise SchemaError(
                        f"{path}: column {got!r} where {want!r} was expected"
                    )
            missing = expected[len(header):]
            extra = header[len(expected):]
            if missing:
                raise SchemaError(f"{path}: missing column {missing[0]!r}")
            raise SchemaError(f"{path}: unexpected column {extra[0]!r}")
        rows = []
        for raw in reader:
            rows.append(
                {
                    "update": int(raw[0]),
                    "episodes_seen": int(raw[1]),
                    "eval_success_rate": float(raw[2]),
                    "mean_advantage": float(raw[3]),
                    "clip_fraction": float(raw[4]),
                    "critic_loss": float(raw[5]),
                    "wall_clock_s": float(raw[6]),
                }
            )
    return rows


def efficiency_curves(
    run_csvs,
    labels=None,
    success_threshold: float = 0.8,
    out_path=None,
):
    """Merge learning curves into one long table aligned on both update index
    and wall clock, plus a per-run time-to-threshold summary.

    Returns (table_rows, summaries). time-to-threshold reports the first
    update whose eval success reached the threshold, or "not reached".
    """
    run_csvs = list(run_csvs)
    if labels is None:
        labels = [str(Path(p).parent.name or Path(p).stem) for p in run_csvs]
    if len(labels) != len(run_csvs):
        raise ValueError("labels and run_csvs lengths differ")

    table = []
    summaries = []
    for label, path in zip(labels, run_csvs):
        rows = _read_curve_csv(path)
        reached = "not reached"
        reached_clock = "not reached"
        for row in rows:
            table.append(
                {
                    "run": label,
                    "update": row["update"],
                    "wall_clock_s": row["wall_clock_s"],
                    "eval_success_rate": row["eval_success_rate"],
                }
            )
            if reached == "not reached" and row["eval_success_rate"] >= success_threshold:
                reached = row["update"]
                reached_clock = row["wall_clock_s"]
        final = rows[-1]["eval_success_rate"] if rows else math.nan
        best = max((r["eval_success_rate"] for r in rows), default=math.nan)
        summaries.append(
            {
                "run": label,
                "final_success": final,
                "best_success": best,
                "threshold": success_threshold,
                "updates_to_threshold": reached,
                "wall_clock_to_threshold": reached_clock,
            }
        )

    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run", "update", "wall_clock_s", "eval_success_rate"])
            for row in table:
                writer.writerow(
                    [
                        row["run"],
                        row["update"],
                        repr(row["wall_clock_s"]),
                        repr(row["eval_success_rate"]),
                    ]
                )
    return table, summaries
