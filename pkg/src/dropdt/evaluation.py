"""Rollouts in frame-dropping environments, drop-rate sweeps, and reports.

The agent only ever sees the delivered stream: observations and the
cumulative reward freeze while frames drop, and the conditioning
reward-to-go is recomputed each step from the delivered cumulative reward,
so it bursts back up to date when a frame finally arrives. Scoring always
uses the true accumulated reward, which the drop process never touches.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .drops import DropProcessConfig, FrameDropWrapper, markov_steady_state
from .envs import env_spec, make_env
from .errors import ConfigurationError, InvalidInputError
from .model import DropDT, RolloutContext
from .rngs import child_rng, child_seed

DEFAULT_RATES = tuple(round(0.1 * i, 1) for i in range(10))


@dataclass
class EvalConfig:
    drop_rates: tuple = DEFAULT_RATES
    trials_per_rate: int = 10
    seeds: tuple = (0, 1, 2)
    target_return: float | None = None  # default: env spec's target
    max_steps: int | None = None  # default: env spec's episode limit
    eval_process: str = "bernoulli"  # bernoulli | markov
    markov_pairs: tuple = ()  # ((p1, p2), ...) when eval_process == "markov"
    action_mode: str = "mean"
    placeholder: str = "repeat_last"
    noise_scale: float = 0.1

    def validate(self) -> None:
        if self.eval_process not in ("bernoulli", "markov"):
            raise ConfigurationError(f"unknown eval_process {self.eval_process!r}")
        if self.eval_process == "markov":
            if not self.markov_pairs:
                raise ConfigurationError("markov eval needs markov_pairs")
        elif not self.drop_rates:
            raise ConfigurationError("drop_rates must be non-empty")
        for r in self.drop_rates:
            if not (0.0 <= r <= 1.0):
                raise ConfigurationError(f"drop rate {r} outside [0, 1]")
        if self.trials_per_rate < 1 or not self.seeds:
            raise ConfigurationError("need >= 1 trial and >= 1 seed")

    def rate_entries(self):
        """(reported_rate, DropProcessConfig) pairs; markov pairs report
        their stationary drop probability."""
        if self.eval_process == "markov":
            return [
                (round(markov_steady_state(p1, p2), 6), DropProcessConfig.markov(p1, p2))
                for p1, p2 in self.markov_pairs
            ]
        return [(float(r), DropProcessConfig.bernoulli(r)) for r in self.drop_rates]


def rollout(
    model: DropDT,
    wrapped_env: FrameDropWrapper,
    target_return: float,
    max_steps: int,
    policy_rng=None,
    action_mode: str = "mean",
    placeholder: str = "repeat_last",
    noise_scale: float = 0.1,
    noise_stats=None,
    record_trace: bool = False,
):
    """One episode; returns (true_return, length, trace-or-None)."""
    cfg = model.config
    spec = wrapped_env.base_env.spec
    if cfg.state_dim != spec.state_dim:
        raise ConfigurationError(
            f"model state_dim {cfg.state_dim} != env state_dim {spec.state_dim}"
        )
    discrete = cfg.action_head == "categorical"
    if discrete != (spec.action_space.kind == "discrete"):
        raise ConfigurationError("model action head does not match env action space")

    ctx = RolloutContext(
        state_dim=cfg.state_dim,
        action_dim=cfg.action_dim,
        discrete=discrete,
        placeholder=placeholder,
        noise_scale=noise_scale,
        noise_stats=noise_stats,
        noise_rng=policy_rng,
    )
    obs, span = wrapped_env.reset()
    obs_cum = 0.0
    trace = (
        {
            "true_states": [wrapped_env.true_state],
            "observed_states": [obs.copy()],
            "actions": [],
            "dropped": [],
            "spans": [0],
            "observed_rtg": [],
            "true_rtg": [],
        }
        if record_trace
        else None
    )

    length = 0
    for t in range(max_steps):
        ctx.append(target_return - obs_cum, obs, t, span)
        if trace is not None:
            trace["observed_rtg"].append(target_return - obs_cum)
            trace["true_rtg"].append(target_return - wrapped_env.true_return)
        action = model.act(ctx, mode=action_mode, rng=policy_rng)
        ctx.set_last_action(action)
        obs, obs_cum, span, done = wrapped_env.step(action)
        length += 1
        if trace is not None:
            trace["true_states"].append(np.asarray(wrapped_env.true_state, dtype=float))
            trace["observed_states"].append(obs.copy())
            trace["actions"].append(action)
            trace["dropped"].append(span > 0)
            trace["spans"].append(span)
        if done:
            break
    if trace is not None:
        trace = {k: np.asarray(v) for k, v in trace.items()}
    return wrapped_env.true_return, length, trace


@dataclass
class EvalReport:
    """Per-trial returns of a sweep, with aggregation helpers."""

    model_label: str
    env_name: str
    rows: list = field(default_factory=list)  # dicts: seed, drop_rate, trial, return, length

    def add(self, seed, drop_rate, trial, ret, length) -> None:
        self.rows.append(
            {
                "seed": int(seed),
                "drop_rate": float(drop_rate),
                "trial": int(trial),
                "return": float(ret),
                "length": int(length),
            }
        )

    def per_seed_rate(self):
        """{(seed, drop_rate): {mean, std, returns, mean_length}}"""
        out = {}
        for row in self.rows:
            out.setdefault((row["seed"], row["drop_rate"]), []).append(row)
        return {
            key: {
                "mean": float(np.mean([r["return"] for r in rows])),
                "std": float(np.std([r["return"] for r in rows])),
                "returns": [r["return"] for r in rows],
                "mean_length": float(np.mean([r["length"] for r in rows])),
            }
            for key, rows in out.items()
        }

    def aggregate(self):
        """{drop_rate: {mean, std, n, mean_length}} pooled over seeds and trials."""
        by_rate = {}
        for row in self.rows:
            by_rate.setdefault(row["drop_rate"], []).append(row)
        return {
            rate: {
                "mean": float(np.mean([r["return"] for r in rows])),
                "std": float(np.std([r["return"] for r in rows])),
                "n": len(rows),
                "mean_length": float(np.mean([r["length"] for r in rows])),
            }
            for rate, rows in sorted(by_rate.items())
        }

    def mean_at(self, drop_rate: float) -> float:
        return self.aggregate()[float(drop_rate)]["mean"]


def sweep(
    model: DropDT,
    env_name: str,
    config: EvalConfig,
    model_label: str = "model",
    noise_stats=None,
) -> EvalReport:
    """Roll out every (seed, drop_rate, trial) cell with derived seeds.

    Each cell's randomness is keyed by its own labels, so adding rates,
    seeds, or trials never perturbs the other cells' results.
    """
    config.validate()
    spec = env_spec(env_name)
    target = config.target_return if config.target_return is not None else spec.default_target_return
    max_steps = config.max_steps if config.max_steps is not None else spec.max_episode_steps
    report = EvalReport(model_label=model_label, env_name=env_name)
    model.eval()
    for seed in config.seeds:
        for rate, drop_cfg in config.rate_entries():
            for trial in range(config.trials_per_rate):
                env = FrameDropWrapper(
                    make_env(env_name), drop_cfg, child_seed(seed, "eval-env", rate, trial)
                )
                policy_rng = child_rng(seed, "eval-policy", rate, trial)
                ret, length, _ = rollout(
                    model,
                    env,
                    target,
                    max_steps,
                    policy_rng=policy_rng,
                    action_mode=config.action_mode,
                    placeholder=config.placeholder,
                    noise_scale=config.noise_scale,
                    noise_stats=noise_stats,
                )
                report.add(seed, rate, trial, ret, length)
    return report


TRIAL_HEADER = ["model", "env", "seed", "drop_rate", "trial", "return", "length"]
AGG_HEADER = ["model", "env", "drop_rate", "mean_return", "std_return", "n_trials", "mean_length"]


def emit_report(report: EvalReport, path, plot: bool = True):
    """Write per-trial and aggregate CSVs (plus a curve plot) for a sweep.

    `path` names the per-trial table; the aggregate table and plot live next
    to it with `_aggregate.csv` / `.png` suffixes. Returns the paths written.
    """
    if not report.rows:
        raise InvalidInputError("report has no rows; nothing to emit")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRIAL_HEADER)
        for row in report.rows:
            writer.writerow(
                [
                    report.model_label,
                    report.env_name,
                    row["seed"],
                    repr(row["drop_rate"]),
                    row["trial"],
                    repr(row["return"]),
                    row["length"],
                ]
            )
    agg_path = path.with_name(path.stem + "_aggregate.csv")
    agg = report.aggregate()
    with open(agg_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGG_HEADER)
        for rate, stats in agg.items():
            writer.writerow(
                [
                    report.model_label,
                    report.env_name,
                    repr(rate),
                    repr(stats["mean"]),
                    repr(stats["std"]),
                    stats["n"],
                    repr(stats["mean_length"]),
                ]
            )
    written = [path, agg_path]
    if plot:
        png = path.with_suffix(".png")
        plot_reports([path], png)
        written.append(png)
    return written


def read_report(path) -> EvalReport:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise InvalidInputError(f"{path}: empty report")
    report = EvalReport(model_label=rows[0]["model"], env_name=rows[0]["env"])
    for r in rows:
        report.add(r["seed"], float(r["drop_rate"]), r["trial"], float(r["return"]), int(r["length"]))
    return report


def plot_reports(trial_csv_paths, out_path, title: str | None = None):
    """Mean-return-vs-drop-rate curves (std bands), one per report file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for p in trial_csv_paths:
        report = read_report(p)
        agg = report.aggregate()
        rates = sorted(agg)
        means = np.array([agg[r]["mean"] for r in rates])
        stds = np.array([agg[r]["std"] for r in rates])
        ax.plot(rates, means, marker="o", label=report.model_label)
        ax.fill_between(rates, means - stds, means + stds, alpha=0.2)
    ax.set_xlabel("test-time drop rate")
    ax.set_ylabel("mean return")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def visualize_trace(trace, path):
    """Overlay true vs delivered point-mass paths, marking dropped steps."""
    if trace is None or len(trace.get("true_states", [])) == 0:
        raise InvalidInputError("empty trace")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    true_xy = np.asarray(trace["true_states"])[:, :2]
    obs_xy = np.asarray(trace["observed_states"])[:, :2]
    dropped = np.asarray(trace["dropped"], dtype=bool)

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(true_xy[:, 0], true_xy[:, 1], "-", color="tab:purple", label="true state")
    ax.plot(obs_xy[:, 0], obs_xy[:, 1], "--", color="tab:orange", label="delivered state")
    if dropped.any():
        pts = true_xy[1:][dropped]
        ax.scatter(pts[:, 0], pts[:, 1], s=12, color="tab:red", label="dropped frame")
    ax.scatter([1.0], [1.0], marker="*", s=120, color="tab:green", label="goal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
