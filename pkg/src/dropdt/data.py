"""Offline trajectory storage, drop-mask application, and context batching.

A TrajectoryDataset holds uncorrupted trajectories plus derived per-step
cumulative rewards and reward-to-gos. Training never mutates it: a
MaskedView pairs the dataset with the current drop-mask and a placeholder
strategy, and batches are K-step context windows read through that view.
Every window position carries its own drop-span, so each position
independently holds the content the receiver would actually have seen.
"""

from dataclasses import dataclass, field

import numpy as np

from .archive import read_archive, write_archive
from .drops import DropMask, DropProcessConfig, sample_drop_sequence
from .errors import (
    ConfigurationError,
    InsufficientDataError,
    InvalidInputError,
    InvalidWindowError,
)

PLACEHOLDERS = ("repeat_last", "zeros", "noise", "learnable_mask")


def compute_reward_to_go(rewards, trajectory_starts, target_return: float):
    """Per-trajectory cumulative rewards and reward-to-gos (target - cumsum)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    starts = np.asarray(trajectory_starts, dtype=np.int64)
    if starts.size == 0 or starts[0] != 0:
        raise InvalidInputError("trajectory_starts must be non-empty and include 0")
    running = np.cumsum(rewards)
    seg_offset = np.where(starts > 0, running[starts - 1], 0.0)
    lengths = np.diff(np.append(starts, rewards.shape[0]))
    cum = running - np.repeat(seg_offset, lengths)
    return cum, float(target_return) - cum


@dataclass
class TrajectoryDataset:
    """Immutable offline dataset of full, uncorrupted trajectories."""

    states: np.ndarray  # [n, state_dim] float32
    actions: np.ndarray  # [n, action_dim] float32, or [n] int32 ids
    rewards: np.ndarray  # [n] float32
    trajectory_starts: np.ndarray  # sorted, first element 0
    target_return: float
    env_name: str = ""
    tier: str = ""
    episode_returns: np.ndarray | None = None
    cum_rewards: np.ndarray = field(init=False, repr=False)
    reward_to_gos: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        self.trajectory_starts = np.asarray(self.trajectory_starts, dtype=np.int64)
        n = self.states.shape[0]
        if self.rewards.shape[0] != n or self.actions.shape[0] != n:
            raise InvalidInputError("states, actions, rewards must have equal length")
        self.cum_rewards, self.reward_to_gos = compute_reward_to_go(
            self.rewards, self.trajectory_starts, self.target_return
        )

    @property
    def n_transitions(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def discrete_actions(self) -> bool:
        return self.actions.ndim == 1

    @property
    def action_dim(self) -> int:
        return 1 if self.discrete_actions else self.actions.shape[1]

    def trajectory_bounds(self, index: int):
        """[start, end) of the trajectory containing `index`."""
        pos = int(np.searchsorted(self.trajectory_starts, index, side="right")) - 1
        start = int(self.trajectory_starts[pos])
        end = (
            int(self.trajectory_starts[pos + 1])
            if pos + 1 < self.trajectory_starts.shape[0]
            else self.n_transitions
        )
        return start, end

    def trajectory_lengths(self) -> np.ndarray:
        return np.diff(np.append(self.trajectory_starts, self.n_transitions))


def save_dataset(dataset: TrajectoryDataset, path) -> None:
    """Write the dataset archive; identical datasets give identical bytes."""
    arrays = {
        "states": dataset.states.astype("<f4"),
        "rewards": dataset.rewards.astype("<f4"),
    }
    if dataset.discrete_actions:
        arrays["actions"] = dataset.actions.astype("<i4")
    else:
        arrays["actions"] = dataset.actions.astype("<f4")
    if dataset.episode_returns is not None:
        arrays["episode_returns"] = dataset.episode_returns.astype("<f4")
    manifest = {
        "env_name": dataset.env_name,
        "tier": dataset.tier,
        "target_return": dataset.target_return,
        "trajectory_starts": dataset.trajectory_starts.tolist(),
        "n_transitions": dataset.n_transitions,
        "state_dim": dataset.state_dim,
        "action_kind": "discrete" if dataset.discrete_actions else "continuous",
        "action_dim": dataset.action_dim,
    }
    write_archive(path, "trajectory-dataset", manifest, arrays)


def load_dataset(path) -> TrajectoryDataset:
    manifest, arrays = read_archive(path, "trajectory-dataset")
    return TrajectoryDataset(
        states=arrays["states"],
        actions=arrays["actions"],
        rewards=arrays["rewards"],
        trajectory_starts=np.asarray(manifest["trajectory_starts"], dtype=np.int64),
        target_return=float(manifest["target_return"]),
        env_name=manifest["env_name"],
        tier=manifest["tier"],
        episode_returns=arrays.get("episode_returns"),
    )


@dataclass
class NoiseStats:
    """Per-dimension mean/std of within-trajectory consecutive state deltas."""

    mean: np.ndarray
    std: np.ndarray


def estimate_noise_stats(dataset: TrajectoryDataset) -> NoiseStats:
    deltas = []
    for start in dataset.trajectory_starts:
        _, end = dataset.trajectory_bounds(int(start))
        if end - start >= 2:
            seg = dataset.states[start:end].astype(np.float64)
            deltas.append(np.diff(seg, axis=0))
    if not deltas:
        raise InsufficientDataError("need at least one trajectory with >= 2 transitions")
    deltas = np.concatenate(deltas, axis=0)
    return NoiseStats(mean=deltas.mean(axis=0), std=deltas.std(axis=0))


@dataclass
class TokenBatch:
    """A left-padded batch of K-step context windows, ready for the model.

    pad_mask is True at padded positions; those contribute nothing to the
    loss and are invisible to attention. next_obs / next_rtg hold the true
    (unmasked) successor values for the auxiliary prediction heads, valid
    where next_valid is True.
    """

    rtg: np.ndarray  # [B, K] float32
    obs: np.ndarray  # [B, K, state_dim] float32
    act: np.ndarray  # [B, K, action_dim] float32 or [B, K] int64
    timesteps: np.ndarray  # [B, K] int64, within-trajectory step index
    drop_spans: np.ndarray  # [B, K] int64
    pad_mask: np.ndarray  # [B, K] bool
    mask_token_flags: np.ndarray  # [B, K] bool
    next_obs: np.ndarray  # [B, K, state_dim] float32
    next_rtg: np.ndarray  # [B, K] float32
    next_valid: np.ndarray  # [B, K] bool

    @property
    def batch_size(self) -> int:
        return self.rtg.shape[0]

    @property
    def context(self) -> int:
        return self.rtg.shape[1]


@dataclass
class MaskedView:
    """A drop-masked reading of a dataset, with a placeholder strategy.

    placeholder:
      repeat_last    -- dropped positions hold the last delivered value
      zeros          -- dropped positions hold zero vectors
      noise          -- last delivered value plus span-accumulated Gaussian
                        noise fitted to consecutive-observation deltas
      learnable_mask -- content left raw; positions flagged so the model
                        substitutes a learned embedding
    """

    base: TrajectoryDataset
    mask: DropMask
    placeholder: str = "repeat_last"
    noise_scale: float = 0.1
    drop_actions: bool = False
    noise_stats: NoiseStats | None = None

    def __post_init__(self):
        if self.placeholder not in PLACEHOLDERS:
            raise ConfigurationError(
                f"unknown placeholder {self.placeholder!r}; choose from {PLACEHOLDERS}"
            )
        if len(self.mask) != self.base.n_transitions:
            raise InvalidInputError("mask length must equal dataset length")
        if self.placeholder == "noise" and self.noise_stats is None:
            self.noise_stats = estimate_noise_stats(self.base)

    def resample(
        self, config: DropProcessConfig, rng: np.random.Generator, progress: float = 0.0
    ) -> DropMask:
        """Draw and install a fresh drop-mask; returns it."""
        self.mask = sample_drop_sequence(
            config, self.base.n_transitions, self.base.trajectory_starts, rng, progress
        )
        return self.mask

    def window(self, start: int, stop: int, rng: np.random.Generator | None = None):
        """Masked content for [start, stop), which must lie in one trajectory.

        Returns (rtg, obs, act, spans, flags) with the placeholder applied
        per position. Actions come from the raw dataset unless drop_actions
        is set, in which case they repeat the last delivered action.
        """
        ds = self.base
        if not (0 <= start < stop <= ds.n_transitions):
            raise InvalidWindowError(f"window [{start}, {stop}) out of range")
        t_start, t_end = ds.trajectory_bounds(start)
        if stop > t_end:
            raise InvalidWindowError(
                f"window [{start}, {stop}) crosses a trajectory boundary at {t_end}"
            )
        idx = np.arange(start, stop)
        spans = self.mask.drop_spans[idx]
        dropped = self.mask.dropped[idx]
        src = idx - spans
        if np.any(src < t_start):
            raise InvalidInputError("mask has a drop-span reaching before its trajectory")

        if self.placeholder == "repeat_last":
            obs = ds.states[src].astype(np.float32)
            rtg = ds.reward_to_gos[src].astype(np.float32)
        elif self.placeholder == "zeros":
            obs = np.where(dropped[:, None], 0.0, ds.states[idx]).astype(np.float32)
            rtg = np.where(dropped, 0.0, ds.reward_to_gos[idx]).astype(np.float32)
        elif self.placeholder == "noise":
            if rng is None:
                raise InvalidInputError("noise placeholder needs an rng")
            obs = ds.states[src].astype(np.float64)
            k = spans[:, None].astype(np.float64)
            z = rng.standard_normal(obs.shape)
            drift = k * self.noise_stats.mean + np.sqrt(k) * self.noise_stats.std * z
            obs = np.where(dropped[:, None], obs + self.noise_scale * drift, obs)
            obs = obs.astype(np.float32)
            rtg = ds.reward_to_gos[src].astype(np.float32)
        else:  # learnable_mask: model substitutes at the embedding level
            obs = ds.states[idx].astype(np.float32)
            rtg = ds.reward_to_gos[idx].astype(np.float32)

        act = ds.actions[src] if self.drop_actions else ds.actions[idx]
        flags = dropped.copy() if self.placeholder == "learnable_mask" else np.zeros(
            idx.shape[0], dtype=bool
        )
        return rtg, obs, act, spans.astype(np.int64), flags


def apply_mask(view: MaskedView, start: int, stop: int, rng=None):
    """Functional alias for MaskedView.window."""
    return view.window(start, stop, rng)


def sample_batch(
    view: MaskedView, batch_size: int, context: int, rng: np.random.Generator
) -> TokenBatch:
    """Uniformly sample B window anchors and assemble masked K-step rows.

    Each row is the window ending at its anchor, left-padded when the anchor
    sits fewer than K steps into its trajectory.
    """
    ds = view.base
    if ds.n_transitions == 0:
        raise ConfigurationError("dataset is empty")
    if int(ds.trajectory_lengths().max()) < context:
        raise ConfigurationError(
            f"context {context} exceeds the longest trajectory "
            f"({int(ds.trajectory_lengths().max())} steps)"
        )
    B, K = batch_size, context
    state_dim = ds.state_dim
    discrete = ds.discrete_actions

    rtg = np.zeros((B, K), dtype=np.float32)
    obs = np.zeros((B, K, state_dim), dtype=np.float32)
    act = (
        np.zeros((B, K), dtype=np.int64)
        if discrete
        else np.zeros((B, K, ds.action_dim), dtype=np.float32)
    )
    timesteps = np.zeros((B, K), dtype=np.int64)
    spans = np.zeros((B, K), dtype=np.int64)
    pad = np.ones((B, K), dtype=bool)
    flags = np.zeros((B, K), dtype=bool)
    next_obs = np.zeros((B, K, state_dim), dtype=np.float32)
    next_rtg = np.zeros((B, K), dtype=np.float32)
    next_valid = np.zeros((B, K), dtype=bool)

    anchors = rng.integers(0, ds.n_transitions, size=B)
    for b, anchor in enumerate(anchors):
        anchor = int(anchor)
        t_start, t_end = ds.trajectory_bounds(anchor)
        lo = max(t_start, anchor - K + 1)
        w_rtg, w_obs, w_act, w_spans, w_flags = view.window(lo, anchor + 1, rng)
        L = anchor + 1 - lo
        sl = slice(K - L, K)
        rtg[b, sl] = w_rtg
        obs[b, sl] = w_obs
        act[b, sl] = w_act.astype(act.dtype)
        timesteps[b, sl] = np.arange(lo, anchor + 1) - t_start
        spans[b, sl] = w_spans
        pad[b, sl] = False
        flags[b, sl] = w_flags
        w_idx = np.arange(lo, anchor + 1)
        has_next = w_idx + 1 < t_end
        nxt = np.where(has_next, w_idx + 1, w_idx)
        next_obs[b, sl] = ds.states[nxt]
        next_rtg[b, sl] = ds.reward_to_gos[nxt]
        next_valid[b, sl] = has_next

    return TokenBatch(
        rtg=rtg,
        obs=obs,
        act=act,
        timesteps=timesteps,
        drop_spans=spans,
        pad_mask=pad,
        mask_token_flags=flags,
        next_obs=next_obs,
        next_rtg=next_rtg,
        next_valid=next_valid,
    )
