"""Desk-scale environments and the scripted policies that build offline data.

Two deterministic environments stand in for heavier control benchmarks: a
2-D double-integrator point mass (continuous actions, dense reward) and a
one-hot chain walk (discrete actions, sparse reward). Determinism is
deliberate: replaying a stored action sequence from the stored initial state
reproduces the stored states exactly, which is what makes acting from action
history alone possible when every frame is dropped.

Datasets come in three behavior-quality tiers (expert / medium /
medium_replay) produced by adding tier-specific noise to scripted
controllers; no dropping is applied at generation time.
"""

from dataclasses import dataclass

import numpy as np

from .data import TrajectoryDataset
from .errors import InvalidInputError, NumericalError, ConfigurationError
from .rngs import child_rng

POINT_MASS_DT = 0.1
POINT_MASS_GOAL = np.array([1.0, 1.0])
CHAIN_CELLS = 20


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "continuous" | "discrete"
    dim: int  # action dimensionality, or number of discrete actions
    low: float = -1.0
    high: float = 1.0


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_space: ActionSpace
    max_episode_steps: int
    default_target_return: float


def point_mass_transition(state, action):
    """One Euler step of the double integrator; pure in (state, action)."""
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise NumericalError(f"non-finite point-mass state {state}")
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    x, v = state[:2], state[2:]
    v_next = v + a * POINT_MASS_DT
    x_next = x + v_next * POINT_MASS_DT
    reward = -float(np.linalg.norm(x_next - POINT_MASS_GOAL))
    return np.concatenate([x_next, v_next]), reward


def chain_walk_transition(cell: int, action: int):
    """Deterministic move on the chain, clamped at both ends."""
    if action not in (0, 1):
        raise InvalidInputError(f"chain walk action must be 0 (left) or 1 (right), got {action}")
    nxt = min(max(cell + (1 if action == 1 else -1), 0), CHAIN_CELLS - 1)
    reward = 1.0 if nxt == CHAIN_CELLS - 1 and cell != CHAIN_CELLS - 1 else 0.0
    return nxt, reward


class PointMassEnv:
    """Reach (1, 1) from the origin; reward is negative distance to goal."""

    spec = EnvSpec(
        name="point-mass",
        state_dim=4,
        action_space=ActionSpace("continuous", 2),
        max_episode_steps=100,
        default_target_return=-20.0,
    )

    def __init__(self):
        self._state = None
        self._t = 0

    def reset(self):
        self._state = np.zeros(4)
        self._t = 0
        return self._state.copy()

    def step(self, action):
        self._state, reward = point_mass_transition(self._state, action)
        self._t += 1
        done = self._t >= self.spec.max_episode_steps
        return self._state.copy(), reward, done


class ChainWalkEnv:
    """Walk right along 20 cells; +1 for reaching the last cell (terminal)."""

    spec = EnvSpec(
        name="chain-walk",
        state_dim=CHAIN_CELLS,
        action_space=ActionSpace("discrete", 2),
        max_episode_steps=60,
        default_target_return=1.0,
    )

    def __init__(self):
        self._cell = 0
        self._t = 0

    def reset(self):
        self._cell = 0
        self._t = 0
        return self._one_hot()

    def _one_hot(self):
        s = np.zeros(CHAIN_CELLS)
        s[self._cell] = 1.0
        return s

    def step(self, action):
        self._cell, reward = chain_walk_transition(self._cell, int(action))
        self._t += 1
        done = self._cell == CHAIN_CELLS - 1 or self._t >= self.spec.max_episode_steps
        return self._one_hot(), reward, done


ENVS = {"point-mass": PointMassEnv, "chain-walk": ChainWalkEnv}


def make_env(name: str):
    if name not in ENVS:
        raise ConfigurationError(f"unknown env {name!r}; available: {sorted(ENVS)}")
    return ENVS[name]()


def env_spec(name: str) -> EnvSpec:
    if name not in ENVS:
        raise ConfigurationError(f"unknown env {name!r}; available: {sorted(ENVS)}")
    return ENVS[name].spec


def pd_controller_action(state, gain_p: float = 12.0, gain_d: float = 4.0):
    """Scripted point-mass expert: accelerate toward the goal, damp velocity.

    High-bandwidth gains: near time-optimal on fresh observations, but with
    little delay margin, so the same law driven by stale frames oscillates.
    That contrast is the point of this benchmark.
    """
    x, v = state[:2], state[2:]
    return np.clip(gain_p * (POINT_MASS_GOAL - x) - gain_d * v, -1.0, 1.0)


@dataclass(frozen=True)
class DatasetTier:
    """Behavior quality of an offline dataset.

    `noise_levels` are per-episode exploration scales the generator cycles
    through: action noise std for the point mass, epsilon for the chain
    walk. Single-level tiers use one policy throughout; medium_replay mixes
    several qualities, which lowers the mean return and widens its spread.
    """

    tier: str
    behavior_noise: float
    noise_levels: tuple


TIERS = {
    "point-mass": {
        "expert": DatasetTier("expert", 0.05, (0.05,)),
        "medium": DatasetTier("medium", 0.5, (0.5,)),
        "medium_replay": DatasetTier("medium_replay", 0.5, (0.05, 0.5, 1.5)),
    },
    "chain-walk": {
        "expert": DatasetTier("expert", 0.02, (0.02,)),
        "medium": DatasetTier("medium", 0.6, (0.6,)),
        "medium_replay": DatasetTier("medium_replay", 0.6, (0.02, 0.6, 0.8)),
    },
}


def dataset_tier(env_name: str, tier: str) -> DatasetTier:
    tiers = TIERS.get(env_name)
    if tiers is None or tier not in tiers:
        known = sorted(TIERS.get(env_name, {}))
        raise ConfigurationError(f"unknown tier {tier!r} for {env_name!r}; available: {known}")
    return tiers[tier]


def _behavior_action(env_name, state, level, rng):
    if env_name == "point-mass":
        a = pd_controller_action(state)
        return np.clip(a + rng.normal(0.0, level, size=2), -1.0, 1.0)
    # chain walk: epsilon-greedy shortest path (always right)
    if rng.random() < level:
        return int(rng.integers(0, 2))
    return 1


def generate_dataset(env_name: str, tier: str, n_transitions: int, seed: int) -> TrajectoryDataset:
    """Roll out the tier's scripted behavior until >= n_transitions are stored.

    Whole episodes only (the last one is never truncated). States are stored
    uncorrupted; drop-masks are applied later, at training time. The
    dataset's conditioning target is the 95th percentile of its own episode
    returns.
    """
    spec = env_spec(env_name)
    env = make_env(env_name)
    if n_transitions < 1:
        raise InvalidInputError("n_transitions must be >= 1")
    tier_cfg = dataset_tier(env_name, tier)
    rng = child_rng(seed, "behavior", env_name, tier)

    states, actions, rewards, starts, episode_returns = [], [], [], [], []
    total = 0
    episode = 0
    while total < n_transitions:
        level = tier_cfg.noise_levels[episode % len(tier_cfg.noise_levels)]
        s = env.reset()
        starts.append(total)
        ep_return = 0.0
        done = False
        while not done:
            a = _behavior_action(env_name, s, level, rng)
            s_next, r, done = env.step(a)
            states.append(s)
            actions.append(a)
            rewards.append(r)
            ep_return += r
            total += 1
            s = s_next
        episode_returns.append(ep_return)
        episode += 1

    discrete = spec.action_space.kind == "discrete"
    target = float(np.percentile(episode_returns, 95))
    return TrajectoryDataset(
        states=np.asarray(states, dtype=np.float32),
        actions=np.asarray(actions, dtype=np.int32 if discrete else np.float32),
        rewards=np.asarray(rewards, dtype=np.float32),
        trajectory_starts=np.asarray(starts, dtype=np.int64),
        target_return=target,
        env_name=env_name,
        tier=tier,
        episode_returns=np.asarray(episode_returns, dtype=np.float32),
    )
