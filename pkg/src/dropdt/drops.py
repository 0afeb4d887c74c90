"""Random frame dropping: the lossy channel between environment and agent.

At every timestep a binary indicator decides whether the frame is delivered.
A dropped frame permanently loses that step's observation and reward message;
the receiver instead re-sees the last delivered observation and the last
delivered cumulative reward. Rewards keep accumulating on the environment
side, so the next delivered frame carries everything earned in between.

The same process generates train-time drop-masks over offline datasets and
test-time dropping inside the environment wrapper.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    InvalidInputError,
    ProtocolError,
    SteadyStateUndefinedError,
)
from .rngs import child_rng


def _check_prob(name, value):
    if value is None or not (0.0 <= value <= 1.0) or not np.isfinite(value):
        raise ConfigurationError(f"{name} must be a probability in [0, 1], got {value}")


@dataclass
class DropProcessConfig:
    """Stochastic process deciding which frames are dropped.

    kinds:
      bernoulli       -- each frame dropped independently with prob p_d
      markov          -- two-state chain: P(drop next | observed) = p1,
                         P(drop next | dropped) = p2; drops arrive in bursts
      linear_schedule -- bernoulli whose rate ramps p_start -> p_end over
                         training progress (train-time only)
    """

    kind: str = "bernoulli"
    p_d: float | None = None
    p1: float | None = None
    p2: float | None = None
    p_start: float | None = None
    p_end: float | None = None
    guarantee_first_frame: bool = True

    @classmethod
    def bernoulli(cls, p_d: float) -> "DropProcessConfig":
        return cls(kind="bernoulli", p_d=p_d)

    @classmethod
    def markov(cls, p1: float, p2: float) -> "DropProcessConfig":
        return cls(kind="markov", p1=p1, p2=p2)

    @classmethod
    def linear(cls, p_start: float, p_end: float) -> "DropProcessConfig":
        return cls(kind="linear_schedule", p_start=p_start, p_end=p_end)

    def validate(self) -> None:
        if self.kind == "bernoulli":
            _check_prob("p_d", self.p_d)
        elif self.kind == "markov":
            _check_prob("p1", self.p1)
            _check_prob("p2", self.p2)
        elif self.kind == "linear_schedule":
            _check_prob("p_start", self.p_start)
            _check_prob("p_end", self.p_end)
        else:
            raise ConfigurationError(f"unknown drop process kind {self.kind!r}")

    def rate_at(self, progress: float = 0.0) -> float:
        """Scalar drop rate at a training progress fraction in [0, 1]."""
        self.validate()
        if self.kind == "bernoulli":
            return float(self.p_d)
        if self.kind == "linear_schedule":
            frac = min(max(float(progress), 0.0), 1.0)
            return float(self.p_start + (self.p_end - self.p_start) * frac)
        raise ConfigurationError("markov process has no single-step drop rate")


@dataclass
class DropMask:
    """Per-transition drop indicators plus derived spans over a dataset.

    drop_spans[i] counts consecutive dropped frames up to and including i,
    i.e. i - drop_spans[i] indexes the frame the receiver actually holds.
    """

    dropped: np.ndarray
    drop_spans: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.dropped = np.asarray(self.dropped, dtype=bool)
        self.drop_spans = np.asarray(self.drop_spans, dtype=np.int64)

    def __len__(self) -> int:
        return self.dropped.shape[0]


def emit_observation(s_t, s_hat_prev, d: int):
    """Delivered observation: the true frame if d=0, the previous one if d=1."""
    s_t = np.asarray(s_t, dtype=np.float64)
    s_hat_prev = np.asarray(s_hat_prev, dtype=np.float64)
    if s_t.shape != s_hat_prev.shape:
        raise InvalidInputError(
            f"observation shape {s_t.shape} != previous shape {s_hat_prev.shape}"
        )
    return s_hat_prev if d else s_t.copy()


def emit_cumulative_reward(r_cum: float, r_hat_prev: float, d: int) -> float:
    """Delivered cumulative reward: held at the previous value while dropped."""
    return float(r_hat_prev) if d else float(r_cum)


def observed_reward_to_go(r_target: float, r_hat: float) -> float:
    """Conditioning signal: target return minus the delivered cumulative reward."""
    return float(r_target) - float(r_hat)


def markov_steady_state(p1: float, p2: float) -> float:
    """Stationary drop probability of the two-state chain: p1 / (1 + p1 - p2)."""
    _check_prob("p1", p1)
    _check_prob("p2", p2)
    denom = 1.0 + p1 - p2
    if denom == 0.0:
        raise SteadyStateUndefinedError(
            f"chain with p1={p1}, p2={p2} is absorbing; no unique stationary state"
        )
    return p1 / denom


def _normalize_starts(trajectory_starts, length: int) -> np.ndarray:
    starts = np.unique(np.asarray(list(trajectory_starts), dtype=np.int64))
    if starts.size == 0 or starts[0] != 0:
        raise InvalidInputError("trajectory_starts must be non-empty and include 0")
    if starts[-1] >= length or starts[0] < 0:
        raise InvalidInputError(f"trajectory_starts out of range [0, {length})")
    return starts


def drop_spans_from_flags(dropped, trajectory_starts) -> np.ndarray:
    """Distance from each frame to the last delivered frame of its trajectory.

    Delivered frames have span 0. A run of dropped frames counts 1, 2, ...
    from the last delivered frame; a run at a trajectory start counts from
    the boundary (such masks never arise from sampling, which always
    delivers trajectory starts, but the function is total).
    """
    dropped = np.asarray(dropped, dtype=bool)
    n = dropped.shape[0]
    starts = _normalize_starts(trajectory_starts, n)
    idx = np.arange(n, dtype=np.int64)
    candidate = np.where(dropped, np.int64(-n - 1), idx)
    candidate[starts] = np.where(dropped[starts], starts - 1, starts)
    last_delivered = np.maximum.accumulate(candidate)
    return idx - last_delivered


def sample_drop_sequence(
    config: DropProcessConfig,
    length: int,
    trajectory_starts,
    rng: np.random.Generator,
    progress: float = 0.0,
) -> DropMask:
    """Draw a drop-mask over `length` transitions.

    Trajectory starts are always delivered (the chain restarts from the
    "observed" state there). `progress` selects the active rate for
    linear_schedule configs.
    """
    config.validate()
    if length < 1:
        raise InvalidInputError("length must be >= 1")
    starts = _normalize_starts(trajectory_starts, length)

    if config.kind == "markov":
        u = rng.random(length)
        dropped = np.zeros(length, dtype=bool)
        start_set = set(starts.tolist())
        prev = False
        p1, p2 = config.p1, config.p2
        for i in range(length):
            if i in start_set:
                prev = False
                continue
            d = u[i] < (p2 if prev else p1)
            dropped[i] = d
            prev = d
    else:
        p = config.rate_at(progress)
        dropped = rng.random(length) < p
        if config.guarantee_first_frame:
            dropped[starts] = False

    return DropMask(dropped=dropped, drop_spans=drop_spans_from_flags(dropped, starts))


@dataclass
class DropChannelState:
    """Receiver-side state of the lossy channel during a rollout."""

    last_obs: np.ndarray
    last_obs_cumreward: float
    span: int
    true_cumreward: float
    prev_dropped: bool


class FrameDropWrapper:
    """Turns any base environment into one whose frames drop at random.

    The base env must expose `reset() -> state` and
    `step(action) -> (state, reward, done)`. The wrapper exposes the
    delivered stream only: `reset() -> (obs, span)` and
    `step(action) -> (obs, cum_reward, span, done)`. The episode-end flag is
    assumed observable and is never dropped; immediate rewards are never
    exposed. The true accumulated return stays available for scoring via
    `true_return`.
    """

    def __init__(self, base_env, config: DropProcessConfig, seed: int):
        config.validate()
        if config.kind == "linear_schedule":
            raise ConfigurationError(
                "linear_schedule is a train-time construct; wrap with a fixed rate"
            )
        self.base_env = base_env
        self.config = config
        self._rng = child_rng(seed, "env-drop")
        self._state: DropChannelState | None = None
        self._done = True

    def reset(self):
        s0 = np.asarray(self.base_env.reset(), dtype=np.float64)
        self._state = DropChannelState(
            last_obs=s0.copy(),
            last_obs_cumreward=0.0,
            span=0,
            true_cumreward=0.0,
            prev_dropped=False,
        )
        self._last_true_state = s0.copy()
        self._done = False
        return s0.copy(), 0

    def _draw_drop(self) -> bool:
        if self.config.kind == "markov":
            p = self.config.p2 if self._state.prev_dropped else self.config.p1
        else:
            p = self.config.p_d
        return bool(self._rng.random() < p)

    def step(self, action):
        if self._done or self._state is None:
            raise ProtocolError("step() called on a finished or unreset episode")
        s, r, done = self.base_env.step(action)
        st = self._state
        self._last_true_state = np.asarray(s, dtype=np.float64).copy()
        st.true_cumreward += float(r)
        d = self._draw_drop()
        st.prev_dropped = d
        if d:
            st.span += 1
        else:
            st.span = 0
            st.last_obs = np.asarray(s, dtype=np.float64).copy()
            st.last_obs_cumreward = st.true_cumreward
        self._done = bool(done)
        return st.last_obs.copy(), st.last_obs_cumreward, st.span, bool(done)

    @property
    def true_return(self) -> float:
        """Ground-truth accumulated reward; for scoring only, never fed back."""
        if self._state is None:
            raise ProtocolError("no episode has been started")
        return self._state.true_cumreward

    @property
    def true_state(self) -> np.ndarray:
        """Ground-truth current state; for trace visualization only."""
        if self._state is None:
            raise ProtocolError("no episode has been started")
        return self._last_true_state.copy()


def wrap_env(base_env, config: DropProcessConfig, seed: int) -> FrameDropWrapper:
    """Factory matching the channel semantics above."""
    return FrameDropWrapper(base_env, config, seed)
