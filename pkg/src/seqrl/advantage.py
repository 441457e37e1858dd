"""Advantage estimators over trajectory batches, plus the outcome-critic loss.

All estimators are pure functions. The sequence-level family (outcome critic
baseline, group normalization, leave-one-out, greedy baseline) produces one
scalar per trajectory which is broadcast uniformly to every step; the
step-level family (TD-error sums) produces a value per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .nets import MlpGrads, MlpParams, ShapeError, mlp_backward_from_logits, mlp_forward

V_CLAMP = 1e-7  # critic outputs are clamped to [V_CLAMP, 1 - V_CLAMP] before log


@dataclass
class Trajectory:
    """One episode: context observation, per-step records, binary outcome.

    rewards carries whatever the environment emitted; in sparse mode it is
    zero everywhere except the last step, whose value equals R.
    """

    initial_obs: np.ndarray
    observations: np.ndarray      # (T, obs_dim)
    actions: np.ndarray           # (T,) int
    behavior_log_probs: np.ndarray  # (T,) log pi_behavior(a_t | s_t), <= 0
    rewards: np.ndarray           # (T,)
    R: int
    group_id: int = 0

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class AdvantageBatch:
    """Per-trajectory, per-step advantages and the estimator that made them."""

    per_step: list[np.ndarray]
    estimator: str
    degenerate_groups: int = 0

    def flat(self) -> np.ndarray:
        return np.concatenate(self.per_step) if self.per_step else np.zeros(0)


def _critic_value(critic: MlpParams, obs: np.ndarray) -> float:
    if critic.head != "sigmoid":
        raise ShapeError(f"outcome critic must have a sigmoid head, got {critic.head!r}")
    out, _ = mlp_forward(critic, obs)
    return float(out[0])


def critic_values(critic: MlpParams, obs_batch: np.ndarray) -> np.ndarray:
    """V for a (n, obs_dim) batch, returned as shape (n,)."""
    out, _ = mlp_forward(critic, np.atleast_2d(obs_batch))
    return out[:, 0] if out.ndim == 2 else np.atleast_1d(out)


def sppo_advantage(traj: Trajectory, critic: MlpParams) -> float:
    """Outcome minus the critic's solvability estimate for the context: R - V(s0)."""
    return traj.R - _critic_value(critic, traj.initial_obs)


def bce_critic_loss(critic: MlpParams, batch) -> tuple[float, MlpGrads, int]:
    """Mean binary cross entropy of V against 0/1 labels, with its gradient.

    batch is a sequence of (obs, label) pairs or an (obs_matrix, labels) pair.
    Outputs numerically at 0 or 1 are clamped to [1e-7, 1 - 1e-7] before the
    log; the number of clamped outputs is returned as the third element.
    """
    if isinstance(batch, tuple) and len(batch) == 2 and not isinstance(batch[0], tuple):
        obs_mat = np.atleast_2d(np.asarray(batch[0], dtype=float))
        labels = np.asarray(batch[1], dtype=float)
    else:
        pairs = list(batch)
        if not pairs:
            raise ValueError("bce_critic_loss needs a nonempty batch")
        obs_mat = np.stack([np.asarray(o, dtype=float) for o, _ in pairs])
        labels = np.array([float(r) for _, r in pairs])
    if critic.head != "sigmoid":
        raise ShapeError(f"outcome critic must have a sigmoid head, got {critic.head!r}")
    n = len(labels)
    out, cache = mlp_forward(critic, obs_mat)
    v = out[:, 0]
    clamped = int(np.count_nonzero((v < V_CLAMP) | (v > 1.0 - V_CLAMP)))
    vc = np.clip(v, V_CLAMP, 1.0 - V_CLAMP)
    loss = float(-np.mean(labels * np.log(vc) + (1.0 - labels) * np.log(1.0 - vc)))
    # d(mean BCE)/d(logit) = (sigmoid(z) - label) / n, evaluated at the clamped value
    logit_grad = ((vc - labels) / n)[:, None]
    grads = mlp_backward_from_logits(critic, cache, logit_grad)
    return loss, grads, clamped


def gae_from_values(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Discounted sum of TD errors with V(terminal) = 0.

    values[t] estimates V(s_t) for t = 0..T-1; the state after the last step
    is treated as terminal.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape:
        raise ShapeError(f"rewards shape {rewards.shape} != values shape {values.shape}")
    T = len(rewards)
    next_values = np.append(values[1:], 0.0)
    deltas = rewards + gamma * next_values - values
    adv = np.empty(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return adv


def gae_advantage(traj: Trajectory, token_critic: MlpParams, gamma: float, lam: float) -> np.ndarray:
    """Per-step advantages from a step-level critic evaluated on every observation."""
    values = critic_values(token_critic, traj.observations)
    return gae_from_values(traj.rewards, values, gamma, lam)


def grpo_advantage_empirical(group: list[Trajectory]) -> tuple[np.ndarray, bool]:
    """Per-trajectory z-score of R within a same-context group.

    Uses the unbiased (N-1) sample standard deviation. A group whose rewards
    are all identical has no defined z-score; it yields zero advantages and
    the returned flag is True so callers can count degenerate groups.
    """
    if len(group) < 2:
        raise ValueError(f"group normalization needs N >= 2 trajectories, got {len(group)}")
    gids = {t.group_id for t in group}
    if len(gids) != 1:
        raise ValueError(f"group mixes group_ids {sorted(gids)}")
    rewards = np.array([float(t.R) for t in group])
    mean = rewards.mean()
    std = rewards.std(ddof=1)
    if std == 0.0:
        return np.zeros(len(group)), True
    return (rewards - mean) / std, False


def _sqrt_correctly_rounded(value: Fraction) -> float:
    """Float64 square root of an exact rational, correctly rounded.

    Scales by powers of four into a comfortable range (exact in binary),
    takes the float estimate, then picks the neighboring float whose square
    is closest to the exact rational.
    """
    if value < 0:
        raise ValueError("square root of a negative value")
    if value == 0:
        return 0.0
    shift = 0
    while value > Fraction(2) ** 512:
        value /= 4
        shift += 1
    while value < Fraction(2) ** -512:
        value *= 4
        shift -= 1
    est = math.sqrt(value.numerator / value.denominator)
    best, best_err = est, abs(Fraction(est) ** 2 - value)
    for direction in (math.inf, -math.inf):
        x = est
        for _ in range(2):
            x = math.nextafter(x, direction)
            err = abs(Fraction(x) ** 2 - value)
            if err < best_err:
                best, best_err = x, err
    return best * 2.0**shift


def grpo_advantage_analytic(p_hat: float, R: int) -> float:
    """Closed-form large-N limit of the group z-score for 0/1 rewards.

    +sqrt((1-p)/p) for a success, -sqrt(p/(1-p)) for a failure. Computed
    correctly rounded so the algebraically exact cases come out exact.
    """
    if not 0.0 < p_hat < 1.0:
        raise ValueError(f"p_hat must be strictly inside (0, 1), got {p_hat!r}")
    if R not in (0, 1):
        raise ValueError(f"R must be 0 or 1, got {R!r}")
    p = Fraction(p_hat)
    if R == 1:
        return _sqrt_correctly_rounded((1 - p) / p)
    return -_sqrt_correctly_rounded(p / (1 - p))


def rloo_advantage(group: list[Trajectory]) -> np.ndarray:
    """Each trajectory's R minus the mean R of its group peers."""
    n = len(group)
    if n < 2:
        raise ValueError(f"leave-one-out baseline needs N >= 2 trajectories, got {n}")
    rewards = np.array([float(t.R) for t in group])
    total = rewards.sum()
    return rewards - (total - rewards) / (n - 1)


def remax_advantage(sampled: Trajectory, greedy_R: int) -> float:
    """Sampled outcome minus the deterministic greedy rollout's outcome."""
    if greedy_R not in (0, 1):
        raise ValueError(f"greedy_R must be 0 or 1, got {greedy_R!r}")
    return float(sampled.R - greedy_R)


def broadcast_sequence_advantage(traj: Trajectory, advantage: float) -> np.ndarray:
    """The single sequence-level advantage, repeated for every step."""
    return np.full(len(traj), float(advantage))
