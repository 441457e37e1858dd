"""Sequence-level policy-gradient RL on sparse binary-outcome control tasks."""

from .advantage import (
    AdvantageBatch,
    Trajectory,
    bce_critic_loss,
    broadcast_sequence_advantage,
    gae_advantage,
    gae_from_values,
    grpo_advantage_analytic,
    grpo_advantage_empirical,
    remax_advantage,
    rloo_advantage,
    sppo_advantage,
)
from .envs import (
    EnvSpec,
    EnvState,
    Outcome,
    dense_shaping_reward,
    env_reset,
    env_step,
    make_env_spec,
    observe,
    terminal_outcome,
)
from .nets import (
    AdamState,
    MlpGrads,
    MlpParams,
    adam_init,
    adam_step,
    init_mlp,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    sample_categorical,
    save_checkpoint,
)
from .seeding import rng_for
from .train import (
    StageConfig,
    TrainedPolicy,
    behavior_cloning,
    clipped_policy_update,
    collect_rollouts,
    expert_synthesis,
    rl_finetune,
)

__version__ = "0.1.0"
