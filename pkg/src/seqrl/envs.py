"""Deterministic classic-control tasks with a binary-outcome sparse mode.

Each task runs in one of two reward modes: "dense" emits a shaped per-step
reward for synthesizing expert policies; "sparse_outcome" emits 0.0 at every
step and a single terminal reward of exactly 0.0 or 1.0 decided by the task's
success predicate. Dynamics are Euler-integrated with the canonical constants
and are pure float64: the same (state, action) pair always produces the same
next state, bit for bit.

Hot-loop code deliberately uses plain Python floats and math.* — episode
stepping dominates training time and numpy overhead per scalar op is ~10x.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

ENV_IDS = ("precision_cartpole", "mountain_car", "pendulum", "lunar_lander_lite")
REWARD_MODES = ("dense", "sparse_outcome")

HORIZONS = {
    "precision_cartpole": 200,
    "mountain_car": 1000,
    "pendulum": 1000,
    "lunar_lander_lite": 1000,
}

ACTION_COUNTS = {
    "precision_cartpole": 2,   # push left / push right
    "mountain_car": 3,         # push left / coast / push right
    "pendulum": 3,             # torque -2 / 0 / +2
    "lunar_lander_lite": 4,    # noop / rotate left / main thruster / rotate right
}

OBS_DIMS = {
    "precision_cartpole": 4,
    "mountain_car": 2,
    "pendulum": 3,             # (cos th, sin th, scaled thdot)
    "lunar_lander_lite": 8,
}

STATE_COMPONENTS = {
    "precision_cartpole": ("x", "x_dot", "theta", "theta_dot"),
    "mountain_car": ("x", "x_dot"),
    "pendulum": ("theta", "theta_dot"),
    "lunar_lander_lite": (
        "x", "y", "x_dot", "y_dot", "theta", "theta_dot", "left_contact", "right_contact",
    ),
}

_PHYSICS_DEFAULTS = {
    "precision_cartpole": {
        "gravity": 9.8,
        "cart_mass": 1.0,
        "pole_mass": 0.1,
        "half_length": 0.5,
        "force": 10.0,
        "tau": 0.02,
        "fail_angle": 12.0 * math.pi / 180.0,
        "fail_x": 2.4,
    },
    "mountain_car": {
        "force": 0.001,
        "gravity": 0.0025,
        "max_speed": 0.07,
        "min_position": -1.2,
        "max_position": 0.6,
    },
    "pendulum": {
        "gravity": 10.0,
        "mass": 1.0,
        "length": 1.0,
        "tau": 0.05,
        "torque": 2.0,
        "max_speed": 8.0,
        "damping": 0.5,
    },
    "lunar_lander_lite": {
        "gravity": 1.6,
        "main_accel": 4.0,
        "side_accel": 2.5,
        "spin_damping": 0.5,
        "tau": 0.05,
        "leg_height": 0.05,
        "leg_span": 0.2,
        "max_tilt_contact": 0.4,
        "bound_x": 1.5,
        "bound_y": 2.5,
        "rest_speed": 0.08,
        "rest_spin": 0.15,
    },
}

_SUCCESS_DEFAULTS = {
    "precision_cartpole": {"angle_tolerance": 0.5 * math.pi / 180.0},
    "mountain_car": {"goal_position": 0.45},
    "pendulum": {"min_cos_theta": 0.8},
    "lunar_lander_lite": {"pad_half_width": 0.4},
}


class EnvError(ValueError):
    """Misuse of the environment API (bad action, step after done, ...)."""


@dataclass
class EnvSpec:
    """Task identity plus reward mode, horizon, and constants."""

    env_id: str
    horizon: int
    reward_mode: str
    success_params: dict = field(default_factory=dict)
    physics: dict = field(default_factory=dict)

    def action_count(self) -> int:
        return ACTION_COUNTS[self.env_id]

    def obs_dim(self) -> int:
        return OBS_DIMS[self.env_id]


@dataclass
class EnvState:
    """Physical state vector plus step index and a terminal flag."""

    env_id: str
    vec: tuple
    step_index: int
    done: bool = False


@dataclass
class Outcome:
    """Binary episode verdict: success iff the task predicate holds at the end."""

    success: bool
    R: int
    terminal_step: int


def make_env_spec(
    env_id: str,
    reward_mode: str = "sparse_outcome",
    horizon: int | None = None,
    success_params: dict | None = None,
    physics: dict | None = None,
) -> EnvSpec:
    """Validated spec with per-task defaults; horizons are pinned per task."""
    if env_id not in ENV_IDS:
        raise EnvError(f"unknown env_id {env_id!r}, expected one of {ENV_IDS}")
    if reward_mode not in REWARD_MODES:
        raise EnvError(f"unknown reward_mode {reward_mode!r}, expected one of {REWARD_MODES}")
    canonical = HORIZONS[env_id]
    if horizon is None:
        horizon = canonical
    if horizon != canonical:
        raise EnvError(f"{env_id} horizon is fixed at {canonical}, got {horizon}")
    sp = dict(_SUCCESS_DEFAULTS[env_id])
    for key, value in (success_params or {}).items():
        if key not in sp:
            raise EnvError(f"unknown success parameter {key!r} for {env_id}")
        sp[key] = float(value)
    ph = dict(_PHYSICS_DEFAULTS[env_id])
    for key, value in (physics or {}).items():
        if key not in ph:
            raise EnvError(f"unknown physics constant {key!r} for {env_id}")
        ph[key] = float(value)
    return EnvSpec(
        env_id=env_id,
        horizon=int(horizon),
        reward_mode=reward_mode,
        success_params=sp,
        physics=ph,
    )


def dense_spec(spec: EnvSpec) -> EnvSpec:
    return replace(spec, reward_mode="dense")


def sparse_spec(spec: EnvSpec) -> EnvSpec:
    return replace(spec, reward_mode="sparse_outcome")


# --- reset -----------------------------------------------------------------

def env_reset(spec: EnvSpec, rng: np.random.Generator) -> EnvState:
    """Initial state drawn from a small uniform perturbation of the rest state."""
    env_id = spec.env_id
    if env_id == "precision_cartpole":
        vals = rng.uniform(-0.05, 0.05, size=4)
        vec = (float(vals[0]), float(vals[1]), float(vals[2]), float(vals[3]))
    elif env_id == "mountain_car":
        vec = (float(rng.uniform(-0.6, -0.4)), 0.0)
    elif env_id == "pendulum":
        theta = math.pi + float(rng.uniform(-0.5, 0.5))
        theta_dot = float(rng.uniform(-0.2, 0.2))
        vec = (theta, theta_dot)
    else:
        x = float(rng.uniform(-0.3, 0.3))
        vx = float(rng.uniform(-0.05, 0.05))
        vy = float(rng.uniform(-0.05, 0.05))
        vec = (x, 1.2, vx, vy, 0.0, 0.0, 0.0, 0.0)
    return EnvState(env_id=env_id, vec=vec, step_index=0, done=False)


# --- dynamics ---------------------------------------------------------------

def _cartpole_step(ph: dict, vec: tuple, action: int) -> tuple:
    x, x_dot, theta, theta_dot = vec
    force = ph["force"] if action == 1 else -ph["force"]
    total_mass = ph["cart_mass"] + ph["pole_mass"]
    pml = ph["pole_mass"] * ph["half_length"]
    sin_t = math.sin(theta)
    cos_t = math.cos(theta)
    temp = (force + pml * theta_dot * theta_dot * sin_t) / total_mass
    theta_acc = (ph["gravity"] * sin_t - cos_t * temp) / (
        ph["half_length"] * (4.0 / 3.0 - ph["pole_mass"] * cos_t * cos_t / total_mass)
    )
    x_acc = temp - pml * theta_acc * cos_t / total_mass
    tau = ph["tau"]
    return (
        x + tau * x_dot,
        x_dot + tau * x_acc,
        theta + tau * theta_dot,
        theta_dot + tau * theta_acc,
    )


def _mountain_car_step(ph: dict, vec: tuple, action: int) -> tuple:
    x, v = vec
    v += (action - 1) * ph["force"] - math.cos(3.0 * x) * ph["gravity"]
    v = min(max(v, -ph["max_speed"]), ph["max_speed"])
    x += v
    x = min(max(x, ph["min_position"]), ph["max_position"])
    if x <= ph["min_position"] and v < 0.0:
        v = 0.0  # inelastic wall
    return (x, v)


def _pendulum_step(ph: dict, vec: tuple, action: int) -> tuple:
    theta, theta_dot = vec
    u = (action - 1) * ph["torque"]
    g, m, l = ph["gravity"], ph["mass"], ph["length"]
    # rod pivoting at one end (I = m l^2 / 3), with viscous damping
    acc = (3.0 * g / (2.0 * l)) * math.sin(theta) + (3.0 / (m * l * l)) * u
    acc -= ph["damping"] * theta_dot
    theta_dot = theta_dot + acc * ph["tau"]
    theta_dot = min(max(theta_dot, -ph["max_speed"]), ph["max_speed"])
    theta = theta + theta_dot * ph["tau"]
    return (theta, theta_dot)


def _lander_step(ph: dict, vec: tuple, action: int) -> tuple:
    x, y, vx, vy, theta, theta_dot, _, _ = vec
    ax = 0.0
    ay = -ph["gravity"]
    if action == 2:
        ax += ph["main_accel"] * (-math.sin(theta))
        ay += ph["main_accel"] * math.cos(theta)
    spin = 0.0
    if action == 1:
        spin = ph["side_accel"]
    elif action == 3:
        spin = -ph["side_accel"]
    spin -= ph["spin_damping"] * theta_dot
    tau = ph["tau"]
    vx += ax * tau
    vy += ay * tau
    theta_dot += spin * tau
    x += vx * tau
    y += vy * tau
    theta += theta_dot * tau
    lc, rc = _lander_contacts(ph, y, theta)
    return (x, y, vx, vy, theta, theta_dot, lc, rc)


def _lander_contacts(ph: dict, y: float, theta: float) -> tuple:
    if abs(theta) > ph["max_tilt_contact"]:
        return (0.0, 0.0)
    span_drop = ph["leg_span"] * math.sin(theta)
    lc = 1.0 if y + span_drop <= ph["leg_height"] else 0.0
    rc = 1.0 if y - span_drop <= ph["leg_height"] else 0.0
    return (lc, rc)


def _lander_at_rest(ph: dict, vec: tuple) -> bool:
    _, _, vx, vy, _, theta_dot, _, _ = vec
    return (
        abs(vx) <= ph["rest_speed"]
        and abs(vy) <= ph["rest_speed"]
        and abs(theta_dot) <= ph["rest_spin"]
    )


def _terminal_check(spec: EnvSpec, vec: tuple, step_index: int) -> bool:
    """True when the episode ends at this (post-step) state."""
    ph = spec.physics
    env_id = spec.env_id
    if step_index >= spec.horizon:
        return True
    if env_id == "precision_cartpole":
        x, _, theta, _ = vec
        return abs(theta) > ph["fail_angle"] or abs(x) > ph["fail_x"]
    if env_id == "mountain_car":
        return vec[0] >= spec.success_params["goal_position"]
    if env_id == "pendulum":
        return False
    x, y, _, _, _, _, lc, rc = vec
    if y <= 0.0:
        return True
    if lc > 0.5 and rc > 0.5 and _lander_at_rest(ph, vec):
        return True
    return abs(x) > ph["bound_x"] or y > ph["bound_y"]


_STEP_FNS = {
    "precision_cartpole": _cartpole_step,
    "mountain_car": _mountain_car_step,
    "pendulum": _pendulum_step,
    "lunar_lander_lite": _lander_step,
}


def env_step(spec: EnvSpec, state: EnvState, action: int) -> tuple[EnvState, float, bool]:
    """Advance one step. Returns (next_state, reward, done).

    Dense mode rewards every transition with the task's shaping; sparse mode
    rewards 0.0 everywhere except the terminal step, which pays the binary
    outcome.
    """
    if state.done:
        raise EnvError(f"env_step called on a finished episode (step {state.step_index})")
    if state.step_index >= spec.horizon:
        raise EnvError(f"step_index {state.step_index} already at horizon {spec.horizon}")
    n_actions = ACTION_COUNTS[spec.env_id]
    if not 0 <= action < n_actions:
        raise EnvError(f"action {action} out of range [0, {n_actions}) for {spec.env_id}")

    next_vec = _STEP_FNS[spec.env_id](spec.physics, state.vec, action)
    next_index = state.step_index + 1
    done = _terminal_check(spec, next_vec, next_index)
    next_state = EnvState(env_id=spec.env_id, vec=next_vec, step_index=next_index, done=done)

    if spec.reward_mode == "dense":
        reward = dense_shaping_reward(spec, state, action, next_state)
    else:
        reward = float(_success_predicate(spec, next_state)) if done else 0.0
    return next_state, reward, done


# --- outcome ----------------------------------------------------------------

def _success_predicate(spec: EnvSpec, final_state: EnvState) -> bool:
    sp = spec.success_params
    vec = final_state.vec
    env_id = spec.env_id
    if env_id == "precision_cartpole":
        survived = final_state.step_index >= spec.horizon
        return survived and abs(vec[2]) <= sp["angle_tolerance"]
    if env_id == "mountain_car":
        return vec[0] >= sp["goal_position"]
    if env_id == "pendulum":
        return math.cos(vec[0]) > sp["min_cos_theta"]
    x, _, _, _, _, _, lc, rc = vec
    return (
        lc > 0.5
        and rc > 0.5
        and abs(x) < sp["pad_half_width"]
        and _lander_at_rest(spec.physics, vec)
    )


def terminal_outcome(spec: EnvSpec, final_state: EnvState) -> Outcome:
    """Binary verdict for a finished episode; rejects mid-episode states."""
    if not final_state.done:
        raise EnvError(
            f"terminal_outcome called mid-episode (step {final_state.step_index}, not done)"
        )
    success = _success_predicate(spec, final_state)
    return Outcome(success=success, R=1 if success else 0, terminal_step=final_state.step_index)


# --- dense shaping ----------------------------------------------------------

def _lander_potential(vec: tuple) -> float:
    x, y, vx, vy, theta, _, _, _ = vec
    return -(
        1.0 * math.sqrt(x * x + y * y)
        + 0.3 * math.sqrt(vx * vx + vy * vy)
        + 0.3 * abs(theta)
    )


def dense_shaping_reward(spec: EnvSpec, state: EnvState, action: int, next_state: EnvState) -> float:
    """Per-task shaped reward for expert synthesis. Dense mode only."""
    if spec.reward_mode != "dense":
        raise EnvError("dense_shaping_reward called on a sparse_outcome spec")
    env_id = spec.env_id
    if env_id == "precision_cartpole":
        # survival pay plus an uprightness bonus
        return 1.0 - abs(next_state.vec[2])
    if env_id == "mountain_car":
        # always-negative step cost so finishing early is preferred; speed and
        # height terms give the climb a gradient
        x, v = next_state.vec
        return -1.0 + 8.0 * abs(v) + 0.2 * (math.sin(3.0 * x) + 1.0) / 2.0
    if env_id == "pendulum":
        theta, theta_dot = state.vec
        theta_norm = math.atan2(math.sin(theta), math.cos(theta))
        u = (action - 1) * spec.physics["torque"]
        return -(theta_norm * theta_norm + 0.1 * theta_dot * theta_dot + 0.001 * u * u)
    reward = _lander_potential(next_state.vec) - _lander_potential(state.vec)
    reward += 0.2 * (next_state.vec[6] + next_state.vec[7])
    if next_state.done and _success_predicate(spec, next_state):
        reward += 10.0
    return reward


# --- observations -----------------------------------------------------------

def observe(spec: EnvSpec, state: EnvState) -> np.ndarray:
    """Network-facing observation; fixed per-task scaling, no learned stats."""
    vec = state.vec
    env_id = spec.env_id
    if env_id == "precision_cartpole":
        return np.array(vec, dtype=float)
    if env_id == "mountain_car":
        return np.array((vec[0], vec[1] * 12.5), dtype=float)
    if env_id == "pendulum":
        return np.array((math.cos(vec[0]), math.sin(vec[0]), vec[1] * 0.25), dtype=float)
    return np.array(vec, dtype=float)


# --- episode dumps ----------------------------------------------------------

def write_episode_csv(path, spec: EnvSpec, states, actions, rewards) -> None:
    """One CSV per episode: step, state components, action, dense_reward, done.

    states has len(actions) + 1 entries (initial state included).
    """
    names = STATE_COMPONENTS[spec.env_id]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", *names, "action", "dense_reward", "done"])
        for t, (action, reward) in enumerate(zip(actions, rewards)):
            state = states[t + 1]
            writer.writerow(
                [t, *[repr(c) for c in state.vec], int(action), repr(float(reward)),
                 int(state.done)]
            )
