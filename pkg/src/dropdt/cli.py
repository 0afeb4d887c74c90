"""Operator CLI: dataset generation, training, finetuning, sweeps, plots.

Every training/finetuning/sweep run is self-describing: its output directory
receives a frozen resolved config alongside logs, checkpoints, and reports.
Exit codes: 0 success, 1 usage/flag conflict, 2 runtime failure,
3 numerical abort.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import estimate_noise_stats, load_dataset, save_dataset
from .envs import generate_dataset
from .errors import (
    ConfigurationError,
    FormatError,
    InsufficientDataError,
    InvalidInputError,
    InvalidWindowError,
    NumericalError,
    ProtocolError,
)
from .evaluation import EvalConfig, emit_report, plot_reports, sweep
from .model import DropDT
from .runconfig import (
    apply_dotted_overrides,
    build_configs,
    deep_merge,
    freeze_config,
    load_config_file,
)
from .training import Trainer, load_policy, save_policy
from .data import NoiseStats

FINETUNE_GROUP_CHOICES = {
    "span": ("dropspan_encoder",),
    "action": ("action_predictor",),
    "both": ("dropspan_encoder", "action_predictor"),
}

ABLATION_PRESETS = {
    "dropspan": {
        "explicit": {"model": {"dropspan_mode": "explicit"}},
        "implicit": {"model": {"dropspan_mode": "implicit", "use_timestep_embedding": True}},
        "none": {"model": {"dropspan_mode": "none"}},
    },
    "placeholder": {
        "repeat": {"train": {"placeholder": "repeat_last"}},
        "zero": {"train": {"placeholder": "zeros"}},
        "noise0.1": {"train": {"placeholder": "noise", "noise_scale": 0.1}},
        "noise0.5": {"train": {"placeholder": "noise", "noise_scale": 0.5}},
        "mask-shared": {
            "train": {"placeholder": "learnable_mask"},
            "model": {"mask_token": "shared"},
        },
        "mask-separate": {
            "train": {"placeholder": "learnable_mask"},
            "model": {"mask_token": "separate"},
        },
    },
    "mask": {
        "resample": {},
        "fixed": {"train": {"fixed_mask": True}},
    },
    "process": {
        "bernoulli": {"train": {"train_drop": {"kind": "bernoulli", "p_d": 0.67}}},
        "markov": {"train": {"train_drop": {"kind": "markov", "p1": 0.2, "p2": 0.9}}},
    },
    "heads": {
        "action": {},
        "+state": {"model": {"predict_state": True}},
        "+rtg": {"model": {"predict_rtg": True}},
        "+both": {"model": {"predict_state": True, "predict_rtg": True}},
    },
    "finetune": {"none": {}, "span": {}, "action": {}, "both": {}},
}


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parse_rates(text):
    return tuple(float(x) for x in text.split(",") if x != "")


def _parse_seeds(text):
    return tuple(int(x) for x in text.split(",") if x != "")


def _resolve(args, extra_sections=None):
    """file config <- section defaults <- explicit flags <- --set overrides."""
    resolved = load_config_file(args.config) if getattr(args, "config", None) else {}
    if extra_sections:
        resolved = deep_merge(resolved, extra_sections)
    flags = {}
    model_flags = {}
    train_flags = {}
    eval_flags = {}
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    if getattr(args, "env", None):
        flags["env"] = args.env
    for name, section, key in [
        ("steps", train_flags, "total_steps"),
        ("batch_size", train_flags, "batch_size"),
        ("lr", train_flags, "learning_rate"),
        ("finetune_steps", train_flags, "finetune_steps"),
        ("placeholder", train_flags, "placeholder"),
        ("noise_scale", train_flags, "noise_scale"),
        ("update_interval", train_flags, "update_interval"),
        ("dropspan_mode", model_flags, "dropspan_mode"),
        ("mask_token", model_flags, "mask_token"),
        ("context", model_flags, "context"),
        ("trials", eval_flags, "trials_per_rate"),
        ("target", eval_flags, "target_return"),
    ]:
        value = getattr(args, name, None)
        if value is not None:
            section[key] = value
    if getattr(args, "drop_rate", None) is not None:
        train_flags["train_drop"] = {"kind": "bernoulli", "p_d": args.drop_rate}
    if getattr(args, "finetune_drop_rate", None) is not None:
        train_flags["finetune_drop"] = {"kind": "bernoulli", "p_d": args.finetune_drop_rate}
    for name, key in [
        ("fixed_mask", "fixed_mask"),
        ("drop_actions", "drop_actions"),
    ]:
        if getattr(args, name, False):
            train_flags[key] = True
    for name, key in [
        ("predict_state", "predict_state"),
        ("predict_rtg", "predict_rtg"),
        ("timestep_embedding", "use_timestep_embedding"),
    ]:
        if getattr(args, name, False):
            model_flags[key] = True
    if getattr(args, "rates", None) is not None:
        eval_flags["drop_rates"] = list(_parse_rates(args.rates))
    if getattr(args, "eval_seeds", None) is not None:
        eval_flags["seeds"] = list(_parse_seeds(args.eval_seeds))
    if model_flags:
        flags["model"] = model_flags
    if train_flags:
        flags["train"] = train_flags
    if eval_flags:
        flags["eval"] = eval_flags
    resolved = deep_merge(resolved, flags)
    resolved = apply_dotted_overrides(resolved, getattr(args, "set", None))
    return resolved


def _policy_extra(dataset, train_cfg, eval_cfg, view_noise_stats=None):
    extra = {
        "env_name": dataset.env_name,
        "target_return": dataset.target_return,
        "placeholder": train_cfg.placeholder,
        "noise_scale": train_cfg.noise_scale,
    }
    if view_noise_stats is not None:
        extra["noise_mean"] = view_noise_stats.mean.tolist()
        extra["noise_std"] = view_noise_stats.std.tolist()
    return extra


def _eval_setup_from_manifest(manifest):
    placeholder = manifest.get("placeholder", "repeat_last")
    noise_scale = manifest.get("noise_scale", 0.1)
    stats = None
    if "noise_mean" in manifest:
        stats = NoiseStats(
            mean=np.asarray(manifest["noise_mean"]), std=np.asarray(manifest["noise_std"])
        )
    return placeholder, noise_scale, stats


def cmd_gen_data(args):
    dataset = generate_dataset(args.env, args.tier, args.n, args.seed)
    save_dataset(dataset, args.out)
    rets = dataset.episode_returns
    print(
        f"wrote {args.out}: {dataset.n_transitions} transitions, "
        f"{len(dataset.trajectory_starts)} episodes ({args.env}/{args.tier})"
    )
    print(
        f"episode returns: mean {rets.mean():.3f}, std {rets.std():.3f}, "
        f"p95 {np.percentile(rets, 95):.3f} (target_return {dataset.target_return:.3f})"
    )
    return 0


def _run_training(resolved, dataset, out_dir, finetune_groups=None, model=None):
    model_cfg, train_cfg, eval_cfg = build_configs(resolved, dataset)
    out_dir = Path(out_dir)
    freeze_config(resolved, model_cfg, train_cfg, eval_cfg, out_dir)
    seed = int(resolved.get("seed", 0))
    train_cfg.seed = seed
    if model is None:
        model = DropDT(model_cfg, seed=seed)
    phase = "finetune" if finetune_groups else "main"
    trainer = Trainer(
        model,
        dataset,
        train_cfg,
        phase=phase,
        trainable_groups=finetune_groups,
        log_path=out_dir / "train_log.jsonl",
    )
    if finetune_groups:
        for p in trainer._frozen:
            p.requires_grad_(False)
    try:
        trainer.run()
    finally:
        if finetune_groups:
            for p in trainer._frozen:
                p.requires_grad_(True)
        trainer.log.close()
    trainer.save(out_dir / "checkpoint.ckpt")
    save_policy(
        out_dir / "policy.ckpt",
        model,
        step=trainer.step,
        extra=_policy_extra(dataset, train_cfg, eval_cfg, trainer.view.noise_stats),
    )
    return model, train_cfg, eval_cfg


def cmd_train(args):
    dataset = load_dataset(args.dataset)
    resolved = _resolve(args)
    resolved.setdefault("env", dataset.env_name)
    resolved.setdefault("dataset", str(args.dataset))
    _run_training(resolved, dataset, args.out)
    print(f"trained policy written to {Path(args.out) / 'policy.ckpt'}")
    return 0


def cmd_finetune(args):
    dataset = load_dataset(args.dataset)
    model, manifest = load_policy(args.checkpoint)
    resolved = _resolve(args)
    resolved.setdefault("env", dataset.env_name)
    resolved.setdefault("dataset", str(args.dataset))
    # the finetune stage reuses the architecture of the loaded policy
    resolved["model"] = deep_merge(dict(manifest["model_config"]), resolved.get("model", {}))
    resolved["model"].pop("state_dim", None)
    resolved["model"].pop("action_dim", None)
    if args.finetune_steps is None and args.steps is not None:
        resolved.setdefault("train", {})["finetune_steps"] = args.steps
    groups = FINETUNE_GROUP_CHOICES[args.groups]
    _run_training(resolved, dataset, args.out, finetune_groups=groups, model=model)
    print(f"finetuned policy written to {Path(args.out) / 'policy.ckpt'}")
    return 0


def _sweep_policy(checkpoint, eval_cfg, label):
    model, manifest = load_policy(checkpoint)
    placeholder, noise_scale, stats = _eval_setup_from_manifest(manifest)
    if eval_cfg.target_return is None:
        eval_cfg.target_return = manifest.get("target_return")
    eval_cfg.placeholder = placeholder
    eval_cfg.noise_scale = noise_scale
    env_name = manifest["env_name"]
    return sweep(model, env_name, eval_cfg, model_label=label, noise_stats=stats)


def cmd_eval(args):
    eval_cfg = EvalConfig(
        drop_rates=(args.rate,),
        trials_per_rate=args.trials,
        seeds=_parse_seeds(args.eval_seeds),
        target_return=args.target,
    )
    label = args.label or Path(args.checkpoint).parent.name
    report = _sweep_policy(args.checkpoint, eval_cfg, label)
    agg = report.aggregate()[float(args.rate)]
    print(
        f"drop rate {args.rate}: mean return {agg['mean']:.3f} ± {agg['std']:.3f} "
        f"over {agg['n']} rollouts (mean length {agg['mean_length']:.1f})"
    )
    if args.out:
        paths = emit_report(report, args.out, plot=False)
        print("wrote", *map(str, paths))
    return 0


def cmd_sweep(args):
    eval_cfg = EvalConfig(
        drop_rates=_parse_rates(args.rates),
        trials_per_rate=args.trials,
        seeds=_parse_seeds(args.eval_seeds),
        target_return=args.target,
    )
    label = args.label or Path(args.checkpoint).parent.name
    report = _sweep_policy(args.checkpoint, eval_cfg, label)
    out_dir = Path(args.out)
    paths = emit_report(report, out_dir / "report.csv", plot=True)
    for rate, stats in report.aggregate().items():
        print(f"rate {rate:.3f}: {stats['mean']:.3f} ± {stats['std']:.3f} (n={stats['n']})")
    print("wrote", *map(str, paths))
    return 0


def cmd_plot(args):
    out = plot_reports(args.reports, args.out, title=args.title)
    print(f"wrote {out}")
    return 0


def cmd_ablate(args):
    if args.list:
        for family, variants in ABLATION_PRESETS.items():
            print(f"{family}: {', '.join(variants)}")
        return 0
    if args.preset is None:
        raise ConfigurationError("choose a preset family or pass --list")
    if args.preset not in ABLATION_PRESETS:
        raise ConfigurationError(
            f"unknown preset {args.preset!r}; families: {sorted(ABLATION_PRESETS)}"
        )
    dataset = load_dataset(args.dataset)
    out_root = Path(args.out)
    report_paths = []

    if args.preset == "finetune":
        base_resolved = _resolve(args)
        base_resolved.setdefault("env", dataset.env_name)
        base_dir = out_root / "main"
        model, train_cfg, eval_cfg = _run_training(base_resolved, dataset, base_dir)
        report = sweep(model, dataset.env_name, eval_cfg, model_label="finetune:none")
        paths = emit_report(report, base_dir / "report.csv", plot=False)
        report_paths.append(paths[0])
        for variant in ("span", "action", "both"):
            vdir = out_root / variant
            vmodel, _ = load_policy(base_dir / "policy.ckpt")
            v_resolved = deep_merge(base_resolved, {})
            _, vtrain, veval = _run_training(
                v_resolved, dataset, vdir, finetune_groups=FINETUNE_GROUP_CHOICES[variant],
                model=vmodel,
            )
            report = sweep(vmodel, dataset.env_name, veval, model_label=f"finetune:{variant}")
            paths = emit_report(report, vdir / "report.csv", plot=False)
            report_paths.append(paths[0])
    else:
        for variant, overrides in ABLATION_PRESETS[args.preset].items():
            resolved = _resolve(args, extra_sections=overrides)
            resolved.setdefault("env", dataset.env_name)
            vdir = out_root / variant.replace("+", "plus_")
            model, train_cfg, eval_cfg = _run_training(resolved, dataset, vdir)
            stats = None
            if train_cfg.placeholder == "noise":
                stats = estimate_noise_stats(dataset)
            report = sweep(
                model,
                dataset.env_name,
                eval_cfg,
                model_label=f"{args.preset}:{variant}",
                noise_stats=stats,
            )
            paths = emit_report(report, vdir / "report.csv", plot=False)
            report_paths.append(paths[0])

    plot_path = plot_reports(report_paths, out_root / f"{args.preset}_comparison.png",
                             title=f"ablation: {args.preset}")
    print(f"{len(report_paths)} runs complete; comparison plot at {plot_path}")
    return 0


def _add_common_train_flags(p):
    p.add_argument("--config", help="YAML run config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--env", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--context", type=int, default=None)
    p.add_argument("--update-interval", dest="update_interval", type=int, default=None)
    p.add_argument("--drop-rate", dest="drop_rate", type=float, default=None)
    p.add_argument("--finetune-drop-rate", dest="finetune_drop_rate", type=float, default=None)
    p.add_argument("--dropspan-mode", dest="dropspan_mode",
                   choices=["explicit", "implicit", "none"], default=None)
    p.add_argument("--placeholder",
                   choices=["repeat_last", "zeros", "noise", "learnable_mask"], default=None)
    p.add_argument("--noise-scale", dest="noise_scale", type=float, default=None)
    p.add_argument("--mask-token", dest="mask_token",
                   choices=["off", "shared", "separate"], default=None)
    p.add_argument("--fixed-mask", dest="fixed_mask", action="store_true")
    p.add_argument("--drop-actions", dest="drop_actions", action="store_true")
    p.add_argument("--predict-state", dest="predict_state", action="store_true")
    p.add_argument("--predict-rtg", dest="predict_rtg", action="store_true")
    p.add_argument("--timestep-embedding", dest="timestep_embedding", action="store_true")
    p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                   help="override any resolved config entry")


def build_parser() -> CliParser:
    parser = CliParser(prog="dropdt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset")
    p.add_argument("--env", required=True)
    p.add_argument("--tier", required=True)
    p.add_argument("--n", type=int, default=50_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="main-stage training on a masked dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_common_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="freeze-trunk finetuning of a trained policy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--groups", choices=sorted(FINETUNE_GROUP_CHOICES), default="both")
    p.add_argument("--finetune-steps", dest="finetune_steps", type=int, default=None)
    _add_common_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a policy at one drop rate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rate", type=float, default=0.0)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--eval-seeds", dest="eval_seeds", default="0,1,2")
    p.add_argument("--target", type=float, default=None)
    p.add_argument("--label", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="drop-rate sweep with report files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rates", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--eval-seeds", dest="eval_seeds", default="0,1,2")
    p.add_argument("--target", type=float, default=None)
    p.add_argument("--label", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="overlay curves from one or more report tables")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--title", default=None)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("ablate", help="run a preset ablation family")
    p.add_argument("preset", nargs="?", default=None)
    p.add_argument("--list", action="store_true")
    p.add_argument("--dataset")
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--rates", default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--eval-seeds", dest="eval_seeds", default=None)
    _add_common_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except (ConfigurationError, InvalidInputError, InvalidWindowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, FormatError, ProtocolError, InsufficientDataError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
