"""Offline RL under random frame dropping: data, model, training, evaluation."""

from .data import (
    MaskedView,
    TokenBatch,
    TrajectoryDataset,
    apply_mask,
    compute_reward_to_go,
    estimate_noise_stats,
    load_dataset,
    sample_batch,
    save_dataset,
)
from .drops import (
    DropMask,
    DropProcessConfig,
    FrameDropWrapper,
    drop_spans_from_flags,
    emit_cumulative_reward,
    emit_observation,
    markov_steady_state,
    observed_reward_to_go,
    sample_drop_sequence,
    wrap_env,
)
from .envs import EnvSpec, env_spec, generate_dataset, make_env
from .evaluation import EvalConfig, EvalReport, emit_report, rollout, sweep, visualize_trace
from .model import DropDT, ModelConfig, RolloutContext
from .training import (
    TrainConfig,
    Trainer,
    freeze_trunk_finetune,
    load_policy,
    save_policy,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
