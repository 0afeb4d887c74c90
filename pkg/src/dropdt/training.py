"""Training loop: masked-batch optimization, freeze-trunk finetuning, checkpoints.

The main stage optimizes the whole network on drop-masked context windows,
resampling the mask on a fixed step interval. The finetune stage repeats the
procedure at a (typically higher) drop rate while updating only the
drop-span encoder and/or the action predictor; everything else is excluded
from the optimizer entirely, so frozen parameters stay bit-identical.
"""

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .archive import read_archive, write_archive
from .data import MaskedView, TrajectoryDataset, sample_batch
from .drops import DropMask, DropProcessConfig, drop_spans_from_flags, markov_steady_state
from .errors import ConfigurationError, NumericalError
from .model import DropDT, ModelConfig
from .rngs import child_rng, child_seed

FINETUNE_GROUPS = ("dropspan_encoder", "action_predictor")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 256
    total_steps: int = 20_000
    finetune_steps: int | None = None  # defaults to total_steps // 5
    warmup_steps: int | None = None  # defaults to total_steps // 10
    grad_clip_norm: float = 0.25
    update_interval: int = 100
    train_drop: DropProcessConfig = field(default_factory=lambda: DropProcessConfig.bernoulli(0.5))
    finetune_drop: DropProcessConfig = field(
        default_factory=lambda: DropProcessConfig.bernoulli(0.8)
    )
    placeholder: str = "repeat_last"
    noise_scale: float = 0.1
    drop_actions: bool = False
    fixed_mask: bool = False
    # compatibility reading: shrink the mask-resample interval 5x during
    # finetuning instead of keeping it fixed
    finetune_shrinks_interval: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.finetune_steps is None:
            self.finetune_steps = self.total_steps // 5
        if self.warmup_steps is None:
            self.warmup_steps = max(1, self.total_steps // 10)

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be >= 1")
        if self.finetune_steps > self.total_steps:
            raise ConfigurationError("finetune_steps must be <= total_steps")
        if self.warmup_steps >= self.total_steps:
            raise ConfigurationError("warmup_steps must be < total_steps")
        self.train_drop.validate()
        self.finetune_drop.validate()


def discrete_train_defaults(**overrides) -> TrainConfig:
    """Training defaults tuned for the discrete/categorical setting."""
    base = dict(
        learning_rate=6e-4,
        weight_decay=0.1,
        batch_size=128,
        grad_clip_norm=1.0,
        update_interval=1000,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _drop_rate_label(config: DropProcessConfig, progress: float) -> float:
    if config.kind == "markov":
        return markov_steady_state(config.p1, config.p2)
    return config.rate_at(progress)


def _global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


class _LogWriter:
    def __init__(self, path=None):
        self.path = path
        self.records = []
        self._fh = open(path, "a") if path else None

    def emit(self, record: dict) -> None:
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def read_training_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


class Trainer:
    """Owns model, optimizer, masked view, and the labeled random streams.

    `phase` selects the stream labels and drop config ("main" or
    "finetune") so the two stages never share randomness. Checkpoints carry
    parameters, optimizer moments, active mask, and rng states; resuming
    reproduces the uninterrupted run exactly.
    """

    def __init__(
        self,
        model: DropDT,
        dataset: TrajectoryDataset,
        config: TrainConfig,
        phase: str = "main",
        trainable_groups=None,
        log_path=None,
    ):
        config.validate()
        self._check_dims(model, dataset)
        self.model = model
        self.dataset = dataset
        self.config = config
        self.phase = phase
        self.step = 0
        self.log = _LogWriter(log_path)

        if phase == "main":
            self.n_steps = config.total_steps
            self.warmup = config.warmup_steps
            self.drop_config = config.train_drop
            self.update_interval = config.update_interval
        elif phase == "finetune":
            self.n_steps = config.finetune_steps
            self.warmup = max(1, config.finetune_steps // 10)
            self.drop_config = config.finetune_drop
            self.update_interval = config.update_interval
            if config.finetune_shrinks_interval:
                self.update_interval = max(1, config.update_interval // 5)
        else:
            raise ConfigurationError(f"unknown phase {phase!r}")

        groups = model.parameter_groups()
        if trainable_groups is None:
            self.trainable = [p for ps in groups.values() for p in ps]
        else:
            unknown = set(trainable_groups) - set(FINETUNE_GROUPS)
            if unknown:
                raise ConfigurationError(f"cannot finetune groups {sorted(unknown)}")
            if not trainable_groups:
                raise ConfigurationError("finetune group selection is empty")
            self.trainable = [p for g in trainable_groups for p in groups[g]]
            if not self.trainable:
                raise ConfigurationError(
                    f"groups {sorted(trainable_groups)} hold no parameters; nothing to tune"
                )
        self.trainable_groups = tuple(trainable_groups) if trainable_groups else None

        torch.manual_seed(child_seed(config.seed, phase, "torch"))
        self.mask_rng = child_rng(config.seed, phase, "drop-mask")
        self.batch_rng = child_rng(config.seed, phase, "batch")

        trainable_ids = {id(p) for p in self.trainable}
        decay, no_decay = [], []
        for p in self.trainable:
            (decay if p.dim() >= 2 else no_decay).append(p)
        self.optimizer = torch.optim.AdamW(
            [
                {"params": decay, "weight_decay": config.weight_decay},
                {"params": no_decay, "weight_decay": 0.0},
            ],
            lr=config.learning_rate,
        )
        self._frozen = [p for p in model.parameters() if id(p) not in trainable_ids]

        empty_mask = DropMask(
            dropped=np.zeros(dataset.n_transitions, dtype=bool),
            drop_spans=np.zeros(dataset.n_transitions, dtype=np.int64),
        )
        self.view = MaskedView(
            base=dataset,
            mask=empty_mask,
            placeholder=config.placeholder,
            noise_scale=config.noise_scale,
            drop_actions=config.drop_actions,
        )
        self._nonfinite_streak = 0

    @staticmethod
    def _check_dims(model: DropDT, dataset: TrajectoryDataset) -> None:
        cfg = model.config
        if cfg.state_dim != dataset.state_dim:
            raise ConfigurationError(
                f"model state_dim {cfg.state_dim} != dataset state_dim {dataset.state_dim}"
            )
        discrete = cfg.action_head == "categorical"
        if discrete != dataset.discrete_actions:
            raise ConfigurationError("model action head does not match dataset action kind")
        if not discrete and cfg.action_dim != dataset.action_dim:
            raise ConfigurationError(
                f"model action_dim {cfg.action_dim} != dataset action_dim {dataset.action_dim}"
            )

    def _progress(self) -> float:
        return self.step / self.n_steps

    def _maybe_resample(self) -> None:
        if self.step % self.update_interval != 0:
            return
        if self.config.fixed_mask and self.step > 0:
            return
        self.view.resample(self.drop_config, self.mask_rng, self._progress())
        self.log.emit(
            {
                "event": "mask_resample",
                "step": self.step,
                "phase": self.phase,
                "drop_rate": _drop_rate_label(self.drop_config, self._progress()),
            }
        )

    def run(self, until_step: int | None = None) -> list:
        """Advance training to `until_step` (default: the phase's full length)."""
        was_training = self.model.training
        self.model.train()
        target = self.n_steps if until_step is None else min(until_step, self.n_steps)
        cfg = self.config
        while self.step < target:
            self._maybe_resample()
            batch = sample_batch(self.view, cfg.batch_size, self.model.config.context, self.batch_rng)
            lr_now = cfg.learning_rate * min((self.step + 1) / self.warmup, 1.0)
            for group in self.optimizer.param_groups:
                group["lr"] = lr_now
            try:
                loss, parts = self.model.loss(batch)
            except NumericalError:
                self._nonfinite_streak += 1
                if self._nonfinite_streak >= 3:
                    raise NumericalError(
                        f"non-finite loss for 3 consecutive steps at step {self.step + 1} "
                        f"(phase={self.phase}, lr={lr_now:.3g})"
                    )
                self.log.emit({"event": "nonfinite_loss", "step": self.step + 1})
                self.step += 1
                continue
            self._nonfinite_streak = 0
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            pre_norm = float(
                torch.nn.utils.clip_grad_norm_(self.trainable, cfg.grad_clip_norm)
            )
            post_norm = _global_grad_norm(self.trainable)
            self.optimizer.step()
            self.step += 1
            self.log.emit(
                {
                    "step": self.step,
                    "phase": self.phase,
                    "loss": float(loss.detach()),
                    **parts,
                    "lr": lr_now,
                    "drop_rate": _drop_rate_label(self.drop_config, (self.step - 1) / self.n_steps),
                    "grad_norm": post_norm,
                    "grad_norm_preclip": pre_norm,
                    "wall_time": time.time(),
                }
            )
        if not was_training:
            self.model.eval()
        return self.log.records

    # -- persistence ---------------------------------------------------

    def save(self, path) -> None:
        """Checkpoint parameters, optimizer moments, mask, and rng states."""
        arrays = {}
        for name, p in self.model.named_parameters():
            arrays[f"param/{name}"] = p.detach().cpu().numpy().astype("<f4")
        opt_names = []
        name_of = {id(p): n for n, p in self.model.named_parameters()}
        for p, st in self.optimizer.state.items():
            n = name_of[id(p)]
            opt_names.append(n)
            for key in ("step", "exp_avg", "exp_avg_sq"):
                arrays[f"opt/{key}/{n}"] = (
                    st[key].detach().cpu().numpy().astype("<f4").reshape(st[key].shape or (1,))
                )
        arrays["mask/dropped"] = self.view.mask.dropped.astype("<u1")
        torch_state = torch.get_rng_state().numpy().astype("<u1")
        arrays["rng/torch"] = torch_state
        manifest = {
            "model_config": asdict(self.model.config),
            "train_config": asdict(self.config),
            "step": self.step,
            "phase": self.phase,
            "trainable_groups": list(self.trainable_groups) if self.trainable_groups else None,
            "optimizer_params": opt_names,
            "rng_mask": self.mask_rng.bit_generator.state,
            "rng_batch": self.batch_rng.bit_generator.state,
        }
        write_archive(path, "checkpoint", manifest, arrays)

    @classmethod
    def restore(cls, path, dataset: TrajectoryDataset, log_path=None) -> "Trainer":
        manifest, arrays = read_archive(path, "checkpoint")
        model = build_model_from_manifest(manifest)
        _load_params(model, manifest, arrays)
        config = _train_config_from_manifest(manifest)
        trainer = cls(
            model,
            dataset,
            config,
            phase=manifest["phase"],
            trainable_groups=manifest["trainable_groups"],
            log_path=log_path,
        )
        trainer.step = int(manifest["step"])
        name_to_param = dict(model.named_parameters())
        for n in manifest["optimizer_params"]:
            p = name_to_param[n]
            trainer.optimizer.state[p] = {
                "step": torch.tensor(float(arrays[f"opt/step/{n}"][0])),
                "exp_avg": torch.from_numpy(arrays[f"opt/exp_avg/{n}"].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"opt/exp_avg_sq/{n}"].copy()),
            }
        dropped = arrays["mask/dropped"].astype(bool)
        trainer.view.mask = DropMask(
            dropped=dropped,
            drop_spans=drop_spans_from_flags(dropped, dataset.trajectory_starts),
        )
        trainer.mask_rng.bit_generator.state = manifest["rng_mask"]
        trainer.batch_rng.bit_generator.state = manifest["rng_batch"]
        torch.set_rng_state(torch.from_numpy(arrays["rng/torch"].copy()))
        return trainer


def _train_config_from_manifest(manifest) -> TrainConfig:
    raw = dict(manifest["train_config"])
    raw["train_drop"] = DropProcessConfig(**raw["train_drop"])
    raw["finetune_drop"] = DropProcessConfig(**raw["finetune_drop"])
    return TrainConfig(**raw)


def build_model_from_manifest(manifest) -> DropDT:
    raw = dict(manifest["model_config"])
    raw["log_std_bounds"] = tuple(raw["log_std_bounds"])
    return DropDT(ModelConfig(**raw))


def _load_params(model: DropDT, manifest, arrays) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in arrays:
                raise ConfigurationError(f"checkpoint missing parameter {name}")
            saved = arrays[key]
            if tuple(saved.shape) != tuple(p.shape):
                raise ConfigurationError(
                    f"checkpoint parameter {name} has shape {saved.shape}, model needs {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(saved.copy()))


def save_policy(path, model: DropDT, step: int = 0, extra: dict | None = None) -> None:
    """Inference-only checkpoint: config echo + parameter arrays."""
    arrays = {
        f"param/{name}": p.detach().cpu().numpy().astype("<f4")
        for name, p in model.named_parameters()
    }
    manifest = {"model_config": asdict(model.config), "step": step, "phase": "policy"}
    if extra:
        manifest.update(extra)
    write_archive(path, "policy", manifest, arrays)


def load_policy(path):
    """Rebuild a model from a policy or trainer checkpoint; returns (model, manifest)."""
    manifest, arrays = read_archive(path, ("policy", "checkpoint"))
    model = build_model_from_manifest(manifest)
    _load_params(model, manifest, arrays)
    model.eval()
    return model, manifest


def train(
    model: DropDT,
    dataset: TrajectoryDataset,
    config: TrainConfig,
    log_path=None,
) -> list:
    """Run the main stage to completion; returns the training log records."""
    trainer = Trainer(model, dataset, config, phase="main", log_path=log_path)
    try:
        return trainer.run()
    finally:
        trainer.log.close()


def freeze_trunk_finetune(
    model: DropDT,
    dataset: TrajectoryDataset,
    config: TrainConfig,
    groups=FINETUNE_GROUPS,
    log_path=None,
) -> list:
    """Finetune only the selected groups at the finetune drop rate.

    Everything outside `groups` (a subset of {dropspan_encoder,
    action_predictor}) is excluded from the optimizer and left bit-identical.
    """
    trainer = Trainer(
        model,
        dataset,
        config,
        phase="finetune",
        trainable_groups=tuple(groups),
        log_path=log_path,
    )
    for p in trainer._frozen:
        p.requires_grad_(False)
    try:
        return trainer.run()
    finally:
        for p in trainer._frozen:
            p.requires_grad_(True)
        trainer.log.close()
