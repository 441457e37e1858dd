"""Three-stage training pipeline: dense-reward expert synthesis, behavior
cloning on filtered successes, then sparse binary-outcome RL fine-tuning with
a pluggable advantage estimator.

Algorithms for the RL stage:
  sppo     sequence-level clipped update, baseline = sigmoid critic on the
           initial observation (one advantage per trajectory, broadcast)
  ppo_gae  step-level clipped update, advantages from TD-error sums against a
           step critic trained by return regression
  ppo_bce  like ppo_gae but the step critic is trained with binary cross
           entropy against the episode outcome
  grpo     group-normalized outcome z-scores over same-context groups
  rloo     leave-one-out group baseline
  remax    deterministic greedy rollout as baseline

Everything is reproducible from (config, seed): RNG streams are derived, eval
episodes reuse fixed initial states, and the learning-curve CSV records a
deterministic cost-model clock (real timing goes to a separate file).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .advantage import (
    AdvantageBatch,
    Trajectory,
    bce_critic_loss,
    broadcast_sequence_advantage,
    critic_values,
    gae_advantage,
    grpo_advantage_empirical,
    remax_advantage,
    rloo_advantage,
    sppo_advantage,
)
from .envs import EnvSpec, env_reset, env_step, observe, terminal_outcome
from .nets import (
    AdamState,
    MlpParams,
    NonFiniteError,
    adam_init,
    adam_step,
    ForwardCache,
    log_softmax,
    init_mlp,
    load_checkpoint,
    mlp_backward_from_logits,
    mlp_forward,
    sample_categorical,
    save_checkpoint,
)
from .seeding import rng_for

ALGORITHMS = ("sppo", "ppo_gae", "ppo_bce", "grpo", "rloo", "remax")
STAGES = ("expert", "sft", "rl")
GROUP_ALGORITHMS = ("grpo", "rloo")

CURVE_COLUMNS = (
    "update",
    "episodes_seen",
    "eval_success_rate",
    "mean_advantage",
    "clip_fraction",
    "critic_loss",
    "wall_clock_s",
)

# Fixed cost model backing the curve's wall_clock_s column. Calibrated once on
# a single CPU core and frozen so identical (config, seed) runs emit byte-
# identical curves; measured time is written separately to timing.csv.
COST_ENV_STEP = 2.5e-05        # per simulated env step (incl. action selection)
COST_POLICY_SAMPLE = 1.5e-06   # per step-sample touched by one policy epoch
COST_CRITIC_SAMPLE = 5.0e-07   # per (obs, target) pair per critic pass


class StageOrderError(RuntimeError):
    """A stage received an input policy from the wrong pipeline stage."""


class ExpertBudgetError(RuntimeError):
    """Expert synthesis exhausted its update budget without any successes."""


class EmptyFilterError(ValueError):
    """The SFT filter rejected every expert trajectory."""


class TrainingDivergedError(RuntimeError):
    """A non-finite loss or parameter appeared during training."""


@dataclass
class StageConfig:
    """Hyperparameters for one pipeline stage.

    batch_size counts initial contexts per update; group algorithms collect
    group_size trajectories per context, so trajectories per update is
    batch_size * group_size (group_size is 1 for everything else).
    """

    stage: str
    algorithm: str = "sppo"
    batch_size: int = 16
    group_size: int = 1
    clip_eps: float = 0.2
    total_updates: int = 100
    gamma: float = 1.0
    lam: float = 1.0
    policy_lr: float = 3e-4
    critic_lr: float = 1e-3
    epochs: int = 4
    minibatches: int = 4
    critic_epochs: int = 4
    hidden: tuple = (64, 64)
    # entropy term added to the surrogate (shared by every algorithm so the
    # comparison stays aligned): positive sustains exploration, negative
    # pressures the policy toward its mode, 0 is plain clipped ascent
    entropy_coef: float = 0.0
    # expert stage only: stop once a training batch's success fraction reaches
    # this level (0 disables; the policy is trained until successes appear,
    # not to mastery, so the cloned stage starts imperfect)
    success_stop: float = 0.0
    # sft stage only
    filter_threshold: float = 0.5
    expert_episodes: int = 256
    min_successes: int = 4
    sft_epochs: int = 60
    holdout_fraction: float = 0.1
    patience: int = 8
    sft_lr: float = 1e-3
    sft_minibatch: int = 256


@dataclass
class RolloutBatch:
    """Trajectories collected by one frozen behavior policy, with grouping."""

    trajectories: list
    groups: list            # index lists into trajectories, one per context
    policy_version: int
    algorithm: str
    group_size: int
    greedy_outcomes: list | None = None  # remax: greedy R per context
    env_steps: int = 0                   # includes greedy baseline rollouts


@dataclass
class TrainedPolicy:
    """Policy parameters plus pipeline provenance."""

    params: MlpParams
    stage: str
    info: dict = field(default_factory=dict)


@dataclass
class PolicyUpdateStats:
    mean_ratio: float
    clip_fraction: float
    surrogate: float
    n_steps: int


@dataclass
class CurveRow:
    update: int
    episodes_seen: int
    eval_success_rate: float
    mean_advantage: float
    clip_fraction: float
    critic_loss: float
    wall_clock_s: float


def _derive_roots(rng, names):
    """Named child streams from either an integer seed or a Generator."""
    if isinstance(rng, (int, np.integer)):
        return {name: rng_for(int(rng), name) for name in names}
    children = rng.spawn(len(names))
    return dict(zip(names, children))


# --- rollout engine ----------------------------------------------------------

@dataclass
class EpisodeRecord:
    initial_obs: np.ndarray
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    outcome_R: int
    states: list | None = None  # populated only when keep_states is set


def run_episodes(
    policy: MlpParams,
    spec: EnvSpec,
    rngs=None,
    initial_states=None,
    greedy: bool = False,
    keep_states: bool = False,
) -> list[EpisodeRecord]:
    """Run episodes in lockstep, batching the policy forward across them.

    Each episode samples actions from its own RNG stream, so results are
    independent of how episodes are interleaved. Greedy mode takes argmax
    actions and needs no RNGs.
    """
    if initial_states is None:
        if rngs is None:
            raise ValueError("run_episodes needs rngs or initial_states")
        initial_states = [env_reset(spec, r) for r in rngs]
    n = len(initial_states)
    if not greedy and (rngs is None or len(rngs) != n):
        raise ValueError("sampling episodes need one RNG per episode")

    current = list(initial_states)
    obs_buf = [[] for _ in range(n)]
    act_buf = [[] for _ in range(n)]
    rew_buf = [[] for _ in range(n)]
    state_buf = [[s] for s in current] if keep_states else None
    outcomes = [0] * n
    alive = [i for i in range(n) if not current[i].done]

    while alive:
        obs_rows = np.stack([observe(spec, current[i]) for i in alive])
        probs, _ = mlp_forward(policy, obs_rows)
        still_alive = []
        for row, i in enumerate(alive):
            if greedy:
                action = int(np.argmax(probs[row]))
            else:
                action = sample_categorical(probs[row], rngs[i])
            nxt, reward, done = env_step(spec, current[i], action)
            obs_buf[i].append(obs_rows[row])
            act_buf[i].append(action)
            rew_buf[i].append(reward)
            if keep_states:
                state_buf[i].append(nxt)
            current[i] = nxt
            if done:
                outcomes[i] = terminal_outcome(spec, nxt).R
            else:
                still_alive.append(i)
        alive = still_alive

    records = []
    for i in range(n):
        records.append(
            EpisodeRecord(
                initial_obs=observe(spec, initial_states[i]),
                observations=np.stack(obs_buf[i]),
                actions=np.array(act_buf[i], dtype=int),
                rewards=np.array(rew_buf[i], dtype=float),
                outcome_R=outcomes[i],
                states=state_buf[i] if keep_states else None,
            )
        )
    return records


def _flatten_observations(records_or_trajs):
    obs = [r.observations for r in records_or_trajs]
    actions = [np.asarray(r.actions, dtype=int) for r in records_or_trajs]
    return np.concatenate(obs, axis=0), np.concatenate(actions)


def _behavior_log_probs(policy: MlpParams, records) -> list[np.ndarray]:
    """Log-probs of all taken actions, recomputed in one full-batch forward.

    The policy update evaluates the exact same stacked matrix at theta_k, so
    the first-epoch importance ratios are exactly 1 (numpy matmul results are
    shape-dependent at the ulp level; sharing the shape removes that).
    """
    X, actions = _flatten_observations(records)
    _, cache = mlp_forward(policy, X)
    logps = log_softmax(cache.logits)[np.arange(len(actions)), actions]
    out = []
    offset = 0
    for rec in records:
        t = len(rec.actions)
        out.append(logps[offset:offset + t].copy())
        offset += t
    return out


def collect_rollouts(
    policy: MlpParams,
    spec: EnvSpec,
    config: StageConfig,
    rng,
    policy_version: int = 0,
) -> RolloutBatch:
    """batch_size contexts, group_size trajectories each, behavior log-probs
    recorded; remax additionally runs one greedy rollout per context."""
    algo = config.algorithm
    n_ctx = config.batch_size
    group_size = config.group_size if algo in GROUP_ALGORITHMS else 1
    if algo in GROUP_ALGORITHMS and group_size < 2:
        raise ValueError(f"{algo} needs group_size >= 2, got {group_size}")

    if isinstance(rng, (int, np.integer)):
        rng = rng_for(int(rng), "collect")
    streams = rng.spawn(n_ctx * (group_size + 1))

    initial_states = []
    sample_rngs = []
    for ctx in range(n_ctx):
        base = ctx * (group_size + 1)
        state0 = env_reset(spec, streams[base])
        for member in range(group_size):
            initial_states.append(state0)
            sample_rngs.append(streams[base + 1 + member])

    records = run_episodes(policy, spec, rngs=sample_rngs, initial_states=initial_states)
    logps = _behavior_log_probs(policy, records)

    trajectories = []
    groups = []
    env_steps = 0
    for ctx in range(n_ctx):
        members = []
        for member in range(group_size):
            idx = ctx * group_size + member
            rec = records[idx]
            env_steps += len(rec.actions)
            trajectories.append(
                Trajectory(
                    initial_obs=rec.initial_obs,
                    observations=rec.observations,
                    actions=rec.actions,
                    behavior_log_probs=logps[idx],
                    rewards=rec.rewards,
                    R=rec.outcome_R,
                    group_id=ctx,
                )
            )
            members.append(idx)
        groups.append(members)

    greedy_outcomes = None
    if algo == "remax":
        # greedy baseline rollouts share each context's initial state
        shared_states = [initial_states[ctx * group_size] for ctx in range(n_ctx)]
        greedy_records = run_episodes(policy, spec, initial_states=shared_states, greedy=True)
        greedy_outcomes = [rec.outcome_R for rec in greedy_records]
        env_steps += sum(len(rec.actions) for rec in greedy_records)

    return RolloutBatch(
        trajectories=trajectories,
        groups=groups,
        policy_version=policy_version,
        algorithm=algo,
        group_size=group_size,
        greedy_outcomes=greedy_outcomes,
        env_steps=env_steps,
    )


# --- advantage assembly -------------------------------------------------------

def estimate_advantages(
    batch: RolloutBatch,
    config: StageConfig,
    outcome_critic: MlpParams | None = None,
    step_critic: MlpParams | None = None,
) -> AdvantageBatch:
    """Dispatch to the configured estimator; sequence-level results broadcast."""
    algo = batch.algorithm
    trajs = batch.trajectories
    degenerate = 0
    if algo == "sppo":
        per_step = [
            broadcast_sequence_advantage(t, sppo_advantage(t, outcome_critic)) for t in trajs
        ]
    elif algo in ("ppo_gae", "ppo_bce"):
        per_step = [gae_advantage(t, step_critic, config.gamma, config.lam) for t in trajs]
    elif algo == "grpo":
        per_step = [None] * len(trajs)
        for members in batch.groups:
            advs, was_degenerate = grpo_advantage_empirical([trajs[i] for i in members])
            degenerate += int(was_degenerate)
            for a, i in zip(advs, members):
                per_step[i] = broadcast_sequence_advantage(trajs[i], float(a))
    elif algo == "rloo":
        per_step = [None] * len(trajs)
        for members in batch.groups:
            advs = rloo_advantage([trajs[i] for i in members])
            for a, i in zip(advs, members):
                per_step[i] = broadcast_sequence_advantage(trajs[i], float(a))
    elif algo == "remax":
        per_step = []
        for ctx, members in enumerate(batch.groups):
            traj = trajs[members[0]]
            adv = remax_advantage(traj, batch.greedy_outcomes[ctx])
            per_step.append(broadcast_sequence_advantage(traj, adv))
    else:
        raise ValueError(f"unknown algorithm {algo!r}")
    return AdvantageBatch(per_step=per_step, estimator=algo, degenerate_groups=degenerate)


# --- clipped policy update ------------------------------------------------------

def clipped_surrogate_terms(ratios, advantages, clip_eps: float) -> np.ndarray:
    """Per-step min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    ratios = np.asarray(ratios, dtype=float)
    advantages = np.asarray(advantages, dtype=float)
    unclipped = ratios * advantages
    clipped = np.clip(ratios, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    return np.minimum(unclipped, clipped)


def _slice_cache(cache: ForwardCache, rows) -> ForwardCache:
    return ForwardCache(
        layer_sizes=cache.layer_sizes,
        head=cache.head,
        acts=[a[rows] for a in cache.acts],
        logits=cache.logits[rows],
        output=cache.output[rows],
        squeezed=False,
    )


def clipped_policy_update(
    policy: MlpParams,
    batch,
    advantages: AdvantageBatch,
    clip_eps: float,
    opt_state: AdamState,
    rows=None,
    entropy_coef: float = 0.0,
) -> tuple[MlpParams, AdamState, PolicyUpdateStats]:
    """One ascent step on the clipped surrogate over the selected steps.

    batch is a RolloutBatch or a list of Trajectory. The forward pass always
    covers the full flattened batch (rows only selects which steps contribute
    gradient), keeping recomputed log-probs bit-identical to collection time.
    """
    trajs = batch.trajectories if isinstance(batch, RolloutBatch) else list(batch)
    if len(advantages.per_step) != len(trajs):
        raise ValueError(
            f"advantages cover {len(advantages.per_step)} trajectories, batch has {len(trajs)}"
        )
    X, actions = _flatten_observations(trajs)
    behavior_logps = np.concatenate([t.behavior_log_probs for t in trajs])
    adv_flat = np.concatenate(
        [np.asarray(a, dtype=float) for a in advantages.per_step]
    )
    if len(adv_flat) != len(actions):
        raise ValueError(
            f"advantages cover {len(adv_flat)} steps, batch has {len(actions)}"
        )
    if rows is None:
        rows = np.arange(len(actions))
    else:
        rows = np.asarray(rows, dtype=int)

    _, cache = mlp_forward(policy, X)
    logps_new = log_softmax(cache.logits)[np.arange(len(actions)), actions]
    ratios = np.exp(logps_new[rows] - behavior_logps[rows])
    if not np.all(np.isfinite(ratios)):
        bad = rows[int(np.argmax(~np.isfinite(ratios)))]
        raise NonFiniteError(f"non-finite importance ratio at flattened step {bad}")

    adv = adv_flat[rows]
    unclipped = ratios * adv
    clipped = np.clip(ratios, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    terms = np.minimum(unclipped, clipped)
    n = len(rows)
    surrogate = float(terms.mean())

    # gradient flows only where the min selects the unclipped branch
    active = unclipped <= clipped
    coeff = np.where(active, ratios * adv, 0.0) / n  # d(mean J)/d(logp), ascent
    probs_rows = cache.output[rows]
    logit_grad = probs_rows * coeff[:, None]
    logit_grad[np.arange(n), actions[rows]] -= coeff
    if entropy_coef != 0.0:
        # ascent on c * mean H: dH/dz_i = -p_i (log p_i + H)
        logp = np.log(np.maximum(probs_rows, 1e-300))
        H = -(probs_rows * logp).sum(axis=1, keepdims=True)
        logit_grad += (entropy_coef / n) * probs_rows * (logp + H)
    # logit_grad is d(-J)/d(logits): descent on the negated surrogate
    grads = mlp_backward_from_logits(policy, _slice_cache(cache, rows), logit_grad)
    new_policy, new_opt = adam_step(policy, grads, opt_state)

    clip_fraction = float(
        np.mean((ratios < 1.0 - clip_eps) | (ratios > 1.0 + clip_eps))
    )
    stats = PolicyUpdateStats(
        mean_ratio=float(ratios.mean()),
        clip_fraction=clip_fraction,
        surrogate=surrogate,
        n_steps=n,
    )
    return new_policy, new_opt, stats


# --- critic updates ------------------------------------------------------------

def _mse_critic_step(critic, opt, X, targets):
    out, cache = mlp_forward(critic, X)
    v = out[:, 0]
    err = v - targets
    loss = float(np.mean(err**2))
    n = len(targets)
    if critic.head == "sigmoid":
        logit_grad = (2.0 * err / n) * v * (1.0 - v)
    else:
        logit_grad = 2.0 * err / n
    grads = mlp_backward_from_logits(critic, cache, logit_grad[:, None])
    critic, opt = adam_step(critic, grads, opt)
    return critic, opt, loss


def _train_critic(critic, opt, X, targets, loss_kind: str, passes: int):
    """A few full-batch passes; returns the loss before the last step."""
    loss = math.nan
    clamped = 0
    for _ in range(passes):
        if loss_kind == "bce":
            loss, grads, n_clamped = bce_critic_loss(critic, (X, targets))
            clamped += n_clamped
            critic, opt = adam_step(critic, grads, opt)
        else:
            critic, opt, loss = _mse_critic_step(critic, opt, X, targets)
    return critic, opt, loss, clamped


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


# --- evaluation -----------------------------------------------------------------

def eval_initial_states(spec: EnvSpec, seed: int, episodes: int):
    """Fixed evaluation start states, the same at every update of a run."""
    return [env_reset(spec, rng_for(seed, "eval", i)) for i in range(episodes)]


def evaluate_policy(policy: MlpParams, spec: EnvSpec, initial_states) -> tuple[float, int]:
    """Argmax-action rollouts from fixed states; returns (success rate, env steps)."""
    records = run_episodes(policy, spec, initial_states=initial_states, greedy=True)
    steps = sum(len(r.actions) for r in records)
    rate = float(np.mean([r.outcome_R for r in records])) if records else 0.0
    return rate, steps


# --- learning-curve CSV ----------------------------------------------------------

def write_curve_csv(path, rows) -> None:
    lines = [",".join(CURVE_COLUMNS)]
    for r in rows:
        lines.append(
            ",".join(
                [
                    str(r.update),
                    str(r.episodes_seen),
                    repr(float(r.eval_success_rate)),
                    repr(float(r.mean_advantage)),
                    repr(float(r.clip_fraction)),
                    repr(float(r.critic_loss)),
                    repr(float(r.wall_clock_s)),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_timing_csv(path, rows) -> None:
    lines = ["update,measured_wall_clock_s"]
    for update, seconds in rows:
        lines.append(f"{update},{seconds!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# --- checkpoint artifacts ----------------------------------------------------------

def save_policy_artifact(path, artifact: TrainedPolicy) -> None:
    """Checkpoint plus a JSON sidecar carrying pipeline provenance."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, artifact.params)
    meta = {"stage": artifact.stage, "info": artifact.info}
    Path(f"{path}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_policy_artifact(path) -> TrainedPolicy:
    params = load_checkpoint(path)
    meta_path = Path(f"{path}.meta.json")
    if not meta_path.exists():
        raise StageOrderError(f"checkpoint {path} has no provenance sidecar")
    meta = json.loads(meta_path.read_text())
    return TrainedPolicy(params=params, stage=meta["stage"], info=meta.get("info", {}))


# --- policy optimization loop shared by expert and rl stages ------------------------

def _policy_epochs(policy, opt, batch, advantages, config, shuffle_rng):
    """config.epochs passes over trajectory minibatches; aggregates stats."""
    n_trajs = len(batch.trajectories)
    n_mb = max(1, min(config.minibatches, n_trajs))
    step_counts = np.array([len(t) for t in batch.trajectories])
    offsets = np.concatenate([[0], np.cumsum(step_counts)])
    total_ratio = total_clip = total_surr = 0.0
    total_steps = 0
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n_trajs)
        for chunk in np.array_split(order, n_mb):
            rows = np.concatenate(
                [np.arange(offsets[i], offsets[i + 1]) for i in chunk]
            )
            policy, opt, stats = clipped_policy_update(
                policy, batch, advantages, config.clip_eps, opt, rows=rows,
                entropy_coef=config.entropy_coef,
            )
            total_ratio += stats.mean_ratio * stats.n_steps
            total_clip += stats.clip_fraction * stats.n_steps
            total_surr += stats.surrogate * stats.n_steps
            total_steps += stats.n_steps
    agg = PolicyUpdateStats(
        mean_ratio=total_ratio / total_steps,
        clip_fraction=total_clip / total_steps,
        surrogate=total_surr / total_steps,
        n_steps=total_steps,
    )
    return policy, opt, agg


def _check_finite(policy: MlpParams, context: str) -> None:
    for arr in (*policy.weights, *policy.biases):
        if not np.all(np.isfinite(arr)):
            raise TrainingDivergedError(f"non-finite parameters after {context}")


# --- stage: expert synthesis ---------------------------------------------------------

def expert_synthesis(
    spec: EnvSpec,
    config: StageConfig,
    rng,
    out_dir=None,
    eval_episodes: int = 32,
):
    """Train a dense-reward policy with the step-level clipped update + TD-sum
    advantages. Returns (TrainedPolicy, critic, curve rows).

    Fails if, within the budget, the sampled training episodes stop showing
    any sparse-predicate successes (the behavior-cloning stage needs them).
    """
    if spec.reward_mode != "dense":
        raise ValueError("expert_synthesis requires a dense-reward spec")
    roots = _derive_roots(rng, ["init", "critic_init", "collect", "shuffle", "eval"])
    obs_dim = spec.obs_dim()
    n_actions = spec.action_count()
    policy = init_mlp((obs_dim, *config.hidden, n_actions), "softmax", roots["init"])
    # dense returns are unbounded, so the expert critic head is linear
    critic = init_mlp((obs_dim, *config.hidden, 1), "linear", roots["critic_init"])
    rows: list[CurveRow] = []
    artifact = TrainedPolicy(params=policy, stage="expert", info={})
    if config.total_updates == 0:
        return artifact, critic, rows

    policy_opt = adam_init(policy, config.policy_lr)
    critic_opt = adam_init(critic, config.critic_lr)
    eval_states = [env_reset(spec, r) for r in roots["eval"].spawn(eval_episodes)]

    cfg = replace(config, algorithm="ppo_gae", group_size=1)
    episodes_seen = 0
    modeled_clock = 0.0
    t0 = time.perf_counter()
    timing = []
    recent_success: list[int] = []
    window = max(1, min(10, config.total_updates)) * config.batch_size

    for update in range(config.total_updates):
        batch = collect_rollouts(
            policy, spec, cfg, roots["collect"].spawn(1)[0], policy_version=update
        )
        advantages = estimate_advantages(batch, cfg, step_critic=critic)
        X, _ = _flatten_observations(batch.trajectories)
        targets = np.concatenate(
            [discounted_returns(t.rewards, config.gamma) for t in batch.trajectories]
        )
        critic, critic_opt, critic_loss, _ = _train_critic(
            critic, critic_opt, X, targets, "mse", config.critic_epochs
        )
        policy, policy_opt, stats = _policy_epochs(
            policy, policy_opt, batch, advantages, cfg, roots["shuffle"]
        )
        _check_finite(policy, f"expert update {update}")

        recent_success.extend(t.R for t in batch.trajectories)
        recent_success = recent_success[-window:]
        eval_rate, eval_steps = evaluate_policy(policy, spec, eval_states)
        episodes_seen += len(batch.trajectories)
        modeled_clock += (batch.env_steps + eval_steps) * COST_ENV_STEP
        modeled_clock += stats.n_steps * COST_POLICY_SAMPLE
        modeled_clock += len(targets) * config.critic_epochs * COST_CRITIC_SAMPLE
        rows.append(
            CurveRow(
                update=update,
                episodes_seen=episodes_seen,
                eval_success_rate=eval_rate,
                mean_advantage=float(advantages.flat().mean()),
                clip_fraction=stats.clip_fraction,
                critic_loss=critic_loss,
                wall_clock_s=modeled_clock,
            )
        )
        timing.append((update, time.perf_counter() - t0))
        if config.success_stop > 0.0:
            batch_success = float(np.mean([t.R for t in batch.trajectories]))
            if batch_success >= config.success_stop:
                break

    if sum(recent_success) < 0.01 * len(recent_success):
        raise ExpertBudgetError(
            f"expert synthesis on {spec.env_id} saw "
            f"{sum(recent_success)}/{len(recent_success)} recent successes (<1%); "
            "enlarge total_updates or adjust the dense shaping"
        )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_curve_csv(out / "curve.csv", rows)
        write_timing_csv(out / "timing.csv", timing)
    artifact = TrainedPolicy(
        params=policy,
        stage="expert",
        info={"final_eval_success": rows[-1].eval_success_rate if rows else 0.0},
    )
    return artifact, critic, rows


def sample_expert_trajectories(
    policy: TrainedPolicy,
    spec: EnvSpec,
    episodes: int,
    rng,
) -> list[Trajectory]:
    """Stochastic rollouts of the expert for cloning; dense-mode rewards kept."""
    if isinstance(rng, (int, np.integer)):
        rng = rng_for(int(rng), "expert-sample")
    rngs = rng.spawn(episodes)
    records = run_episodes(policy.params, spec, rngs=rngs)
    logps = _behavior_log_probs(policy.params, records)
    return [
        Trajectory(
            initial_obs=rec.initial_obs,
            observations=rec.observations,
            actions=rec.actions,
            behavior_log_probs=lp,
            rewards=rec.rewards,
            R=rec.outcome_R,
            group_id=i,
        )
        for i, (rec, lp) in enumerate(zip(records, logps))
    ]


# --- stage: behavior cloning -----------------------------------------------------------

def behavior_cloning(
    expert_trajs,
    filter_fn,
    rng,
    action_count: int,
    config: StageConfig | None = None,
) -> TrainedPolicy:
    """Cross-entropy cloning of filtered trajectories, early-stopped when
    held-out action accuracy plateaus. Raises if the filter keeps nothing."""
    config = config or StageConfig(stage="sft")
    kept = [t for t in expert_trajs if filter_fn(t)]
    if not kept:
        raise EmptyFilterError(
            f"SFT filter rejected all {len(list(expert_trajs))} expert trajectories"
        )
    roots = _derive_roots(rng, ["init", "split", "shuffle"])

    # holdout by trajectory to avoid within-episode leakage
    order = roots["split"].permutation(len(kept))
    n_hold = int(round(config.holdout_fraction * len(kept))) if len(kept) >= 5 else 0
    hold_idx = set(order[:n_hold].tolist())
    train_trajs = [kept[i] for i in range(len(kept)) if i not in hold_idx]
    hold_trajs = [kept[i] for i in range(len(kept)) if i in hold_idx]

    X_train, y_train = _flatten_observations(train_trajs)
    if hold_trajs:
        X_hold, y_hold = _flatten_observations(hold_trajs)
    else:
        X_hold = y_hold = None

    obs_dim = X_train.shape[1]
    policy = init_mlp((obs_dim, *config.hidden, action_count), "softmax", roots["init"])
    opt = adam_init(policy, config.sft_lr)

    def holdout_metrics(p):
        if X_hold is None:
            return math.nan, math.nan
        out, cache = mlp_forward(p, X_hold)
        acc = float(np.mean(np.argmax(out, axis=1) == y_hold))
        logps = log_softmax(cache.logits)
        ce = float(-np.mean(logps[np.arange(len(y_hold)), y_hold]))
        return acc, ce

    # plateau tracking: accuracy leads, held-out cross entropy breaks ties so
    # training keeps sharpening probabilities after argmax accuracy saturates
    best_params = policy.copy()
    best_acc, best_ce = -1.0, math.inf
    stale = 0
    n = len(y_train)
    mb = max(1, min(config.sft_minibatch, n))
    for _ in range(config.sft_epochs):
        order = roots["shuffle"].permutation(n)
        for chunk in np.array_split(order, max(1, n // mb)):
            out, cache = mlp_forward(policy, X_train[chunk])
            m = len(chunk)
            logit_grad = out.copy()
            logit_grad[np.arange(m), y_train[chunk]] -= 1.0
            grads = mlp_backward_from_logits(policy, cache, logit_grad / m)
            policy, opt = adam_step(policy, grads, opt)
        if X_hold is None:
            best_params = policy
            continue
        acc, ce = holdout_metrics(policy)
        improved = acc > best_acc + 1e-4 or (acc >= best_acc and ce < best_ce - 1e-5)
        if improved:
            best_acc = max(best_acc, acc)
            best_ce = min(best_ce, ce)
            best_params = policy.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    if X_hold is None:
        best_acc = math.nan
        best_params = policy
    return TrainedPolicy(
        params=best_params,
        stage="sft",
        info={
            "holdout_accuracy": best_acc,
            "trajectories": len(kept),
            "train_steps": int(n),
        },
    )


def success_filter(threshold: float = 0.5):
    """Keep trajectories whose binary outcome exceeds the threshold."""
    return lambda traj: traj.R > threshold


# --- stage: sparse-outcome RL fine-tuning -------------------------------------------------

def rl_finetune(
    init_policy: TrainedPolicy,
    spec: EnvSpec,
    config: StageConfig,
    rng,
    out_dir=None,
    eval_episodes: int = 32,
    eval_seed: int | None = None,
):
    """Sparse binary-outcome fine-tuning loop: collect, estimate advantages,
    update the critic (if the algorithm has one), take clipped policy steps,
    evaluate, and append a curve row — total_updates times.

    Returns (TrainedPolicy, critic or None, curve rows).
    """
    if not isinstance(init_policy, TrainedPolicy):
        raise StageOrderError("rl_finetune needs a TrainedPolicy with provenance")
    if init_policy.stage != "sft":
        raise StageOrderError(
            f"rl_finetune requires an sft-stage policy, got {init_policy.stage!r}"
        )
    if spec.reward_mode != "sparse_outcome":
        raise ValueError("rl_finetune requires a sparse_outcome spec")
    if config.gamma != 1.0 or config.lam != 1.0:
        raise ValueError(
            f"the sparse stage pins gamma = lam = 1.0, got gamma={config.gamma}, lam={config.lam}"
        )
    if config.algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {config.algorithm!r}, expected one of {ALGORITHMS}")

    roots = _derive_roots(rng, ["critic_init", "collect", "shuffle", "eval"])
    algo = config.algorithm
    obs_dim = spec.obs_dim()
    policy = init_policy.params.copy()
    policy_opt = adam_init(policy, config.policy_lr)

    critic = None
    critic_opt = None
    if algo in ("sppo", "ppo_gae", "ppo_bce"):
        critic = init_mlp((obs_dim, *config.hidden, 1), "sigmoid", roots["critic_init"])
        critic_opt = adam_init(critic, config.critic_lr)

    if eval_seed is not None:
        eval_states = eval_initial_states(spec, eval_seed, eval_episodes)
    else:
        eval_states = [env_reset(spec, r) for r in roots["eval"].spawn(eval_episodes)]

    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

    rows: list[CurveRow] = []
    timing = []
    episodes_seen = 0
    modeled_clock = 0.0
    t0 = time.perf_counter()
    last_good = policy.copy()

    for update in range(config.total_updates):
        batch = collect_rollouts(
            policy, spec, config, roots["collect"].spawn(1)[0], policy_version=update
        )
        advantages = estimate_advantages(
            batch, config, outcome_critic=critic, step_critic=critic
        )

        critic_loss = math.nan
        critic_pairs = 0
        if algo == "sppo":
            # exactly one (initial observation, outcome) pair per trajectory
            X = np.stack([t.initial_obs for t in batch.trajectories])
            targets = np.array([float(t.R) for t in batch.trajectories])
            critic, critic_opt, critic_loss, _ = _train_critic(
                critic, critic_opt, X, targets, "bce", config.critic_epochs
            )
            critic_pairs = len(targets)
        elif algo == "ppo_bce":
            X, _ = _flatten_observations(batch.trajectories)
            targets = np.concatenate(
                [np.full(len(t), float(t.R)) for t in batch.trajectories]
            )
            critic, critic_opt, critic_loss, _ = _train_critic(
                critic, critic_opt, X, targets, "bce", config.critic_epochs
            )
            critic_pairs = len(targets)
        elif algo == "ppo_gae":
            X, _ = _flatten_observations(batch.trajectories)
            targets = np.concatenate(
                [discounted_returns(t.rewards, config.gamma) for t in batch.trajectories]
            )
            critic, critic_opt, critic_loss, _ = _train_critic(
                critic, critic_opt, X, targets, "mse", config.critic_epochs
            )
            critic_pairs = len(targets)

        policy, policy_opt, stats = _policy_epochs(
            policy, policy_opt, batch, advantages, config, roots["shuffle"]
        )

        try:
            _check_finite(policy, f"update {update}")
            if not math.isfinite(stats.surrogate):
                raise TrainingDivergedError(f"non-finite surrogate at update {update}")
            if critic_pairs and not math.isfinite(critic_loss):
                raise TrainingDivergedError(f"non-finite critic loss at update {update}")
        except TrainingDivergedError:
            if out is not None:
                save_policy_artifact(
                    out / "abort_policy.ckpt",
                    TrainedPolicy(params=last_good, stage="rl", info={"aborted_at": update}),
                )
            raise
        last_good = policy.copy()

        eval_rate, eval_steps = evaluate_policy(policy, spec, eval_states)
        episodes_seen += len(batch.trajectories)
        modeled_clock += (batch.env_steps + eval_steps) * COST_ENV_STEP
        modeled_clock += stats.n_steps * COST_POLICY_SAMPLE
        modeled_clock += critic_pairs * config.critic_epochs * COST_CRITIC_SAMPLE
        rows.append(
            CurveRow(
                update=update,
                episodes_seen=episodes_seen,
                eval_success_rate=eval_rate,
                mean_advantage=float(advantages.flat().mean()),
                clip_fraction=stats.clip_fraction,
                critic_loss=critic_loss,
                wall_clock_s=modeled_clock,
            )
        )
        timing.append((update, time.perf_counter() - t0))

    if out is not None:
        write_curve_csv(out / "curve.csv", rows)
        write_timing_csv(out / "timing.csv", timing)

    final = TrainedPolicy(
        params=policy,
        stage="rl",
        info={
            "algorithm": algo,
            "final_eval_success": rows[-1].eval_success_rate if rows else math.nan,
        },
    )
    return final, critic, rows
