"""Run configuration: YAML files, flag overrides, resolution, and freezing.

A run is described by a nested dict (env/dataset/seed/out_dir plus `model`,
`train`, and `eval` sections mirroring the dataclass fields). Files are
optional; command-line overrides win over file values; the fully resolved
dict is written next to the run's outputs so it can be re-run verbatim.
"""

from dataclasses import asdict
from pathlib import Path

import yaml

from .data import TrajectoryDataset
from .drops import DropProcessConfig
from .envs import env_spec
from .errors import ConfigurationError
from .evaluation import EvalConfig
from .model import ModelConfig
from .training import TrainConfig, discrete_train_defaults

DESK_MODEL = dict(n_layers=2, n_heads=2, embed_dim=64, context=20, dropout=0.1)


def desk_model_config(env_name: str, **overrides) -> ModelConfig:
    """Small model sized for the toy envs, paper ratios preserved."""
    spec = env_spec(env_name)
    discrete = spec.action_space.kind == "discrete"
    base = dict(
        state_dim=spec.state_dim,
        action_dim=spec.action_space.dim,
        action_head="categorical" if discrete else "gaussian",
        use_timestep_embedding=discrete,
        max_timestep=max(spec.max_episode_steps, 1),
        action_low=spec.action_space.low,
        action_high=spec.action_space.high,
        **DESK_MODEL,
    )
    base.update(overrides)
    return ModelConfig(**base)


def full_scale_model_config(env_name: str, **overrides) -> ModelConfig:
    """Reference-scale architecture (continuous: 4x4x512 K=20; discrete: 6x8x64 K=30)."""
    spec = env_spec(env_name)
    discrete = spec.action_space.kind == "discrete"
    scale = (
        dict(n_layers=6, n_heads=8, embed_dim=64, context=30)
        if discrete
        else dict(n_layers=4, n_heads=4, embed_dim=512, context=20)
    )
    return desk_model_config(env_name, **{**scale, **overrides})


def default_train_config(env_name: str, **overrides) -> TrainConfig:
    spec = env_spec(env_name)
    if spec.action_space.kind == "discrete":
        return discrete_train_defaults(**overrides)
    return TrainConfig(**overrides)


def _drop_config_from(raw) -> DropProcessConfig:
    if isinstance(raw, DropProcessConfig):
        return raw
    if isinstance(raw, (int, float)):
        return DropProcessConfig.bernoulli(float(raw))
    cfg = DropProcessConfig(**raw)
    cfg.validate()
    return cfg


def load_config_file(path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config file must hold a mapping")
    return data


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_dotted_overrides(config: dict, assignments) -> dict:
    """Apply `a.b.c=value` strings (values parsed as YAML) onto the dict."""
    out = dict(config)
    for item in assignments or []:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                node[part] = nxt
            node = nxt
        node[parts[-1]] = value
    return out


def validate_flags(model: ModelConfig, train: TrainConfig, eval_cfg: EvalConfig) -> None:
    """Up-front consistency checks across the three config objects."""
    conflicts = []
    if model.mask_token != "off" and train.placeholder != "learnable_mask":
        conflicts.append(
            f"mask_token={model.mask_token} requires placeholder=learnable_mask "
            f"(got {train.placeholder})"
        )
    if train.placeholder == "learnable_mask" and model.mask_token == "off":
        conflicts.append("placeholder=learnable_mask requires mask_token=shared or separate")
    if model.dropspan_mode == "implicit" and not model.use_timestep_embedding:
        conflicts.append(
            "dropspan_mode=implicit needs use_timestep_embedding=true "
            "(the span is conveyed through shifted timestep embeddings)"
        )
    if conflicts:
        raise ConfigurationError("conflicting flags: " + "; ".join(conflicts))
    model.validate()
    train.validate()
    eval_cfg.validate()


def build_configs(resolved: dict, dataset: TrajectoryDataset):
    """Turn a resolved run dict into validated (model, train, eval) configs."""
    env_name = resolved.get("env") or dataset.env_name
    spec = env_spec(env_name)

    model_over = dict(resolved.get("model") or {})
    scale = model_over.pop("scale", "desk")
    if scale == "full":
        model = full_scale_model_config(env_name, **model_over)
    else:
        model = desk_model_config(env_name, **model_over)

    train_over = dict(resolved.get("train") or {})
    for key in ("train_drop", "finetune_drop"):
        if key in train_over:
            train_over[key] = _drop_config_from(train_over[key])
    train = default_train_config(env_name, **train_over)

    eval_over = dict(resolved.get("eval") or {})
    eval_over.setdefault("placeholder", train.placeholder)
    eval_over.setdefault("noise_scale", train.noise_scale)
    eval_over.setdefault("target_return", dataset.target_return)
    if "drop_rates" in eval_over:
        eval_over["drop_rates"] = tuple(eval_over["drop_rates"])
    if "seeds" in eval_over:
        eval_over["seeds"] = tuple(eval_over["seeds"])
    if "markov_pairs" in eval_over:
        eval_over["markov_pairs"] = tuple(tuple(p) for p in eval_over["markov_pairs"])
    eval_cfg = EvalConfig(**eval_over)

    validate_flags(model, train, eval_cfg)
    if model.state_dim != spec.state_dim:
        raise ConfigurationError("model dims disagree with the env spec")
    return model, train, eval_cfg


def freeze_config(resolved: dict, model, train, eval_cfg, out_dir) -> Path:
    """Write the fully-resolved run description next to its outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frozen = {
        "env": resolved.get("env"),
        "dataset": resolved.get("dataset"),
        "seed": resolved.get("seed", 0),
        "out_dir": str(out_dir),
        "model": asdict(model),
        "train": asdict(train),
        "eval": asdict(eval_cfg),
    }
    frozen["model"]["log_std_bounds"] = list(model.log_std_bounds)
    path = out_dir / "resolved_config.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump(frozen, fh, sort_keys=True)
    return path
