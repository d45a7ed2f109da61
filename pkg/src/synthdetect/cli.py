"""Command-line front end: synth, train, eval, predict, ablate.

Exit codes: 0 on success, 1 for runtime or numeric failures (unreadable or
malformed files, dimension mismatches, non-finite losses), 2 for usage and
config errors (bad flags, unknown config keys, values outside a field's
domain).

Training reads an optional flat key=value config file; command-line flags
and ``--set key=value`` overrides win over file values. Recognized keys:

    max_iterations batch_size seed alpha gamma nu loss_kind
    input_dim hidden_dims dropout_rate bn_epsilon bn_momentum
    base_lr weight_decay beta1 beta2 adam_epsilon
    total_epochs min_lr beta_noise augment_seed

``hidden_dims`` is a comma-separated width list. ``total_epochs`` defaults
to ``max_iterations`` and ``augment_seed`` to ``seed``. ``input_dim``
defaults to the training bank's dimension.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .augment import AugmentConfig, augment_bank
from .bank import (
    BankFormatError,
    FeatureBank,
    class_counts,
    generate_synthetic,
    load_bank,
    save_bank,
    split_bank,
)
from .metrics import format_report, roc_to_csv
from .mlp import CheckpointFormatError, MlpSpec, load_checkpoint, predict_logits, save_checkpoint
from .optim import AdamWConfig, CosineSchedule, NumericError
from .trainer import (
    LOSS_KINDS,
    TrainConfig,
    ablate_depth,
    ablate_gamma,
    ablation_to_csv,
    evaluate,
    format_train_log,
    train,
)


class UsageError(Exception):
    """Flag or config problem; maps to exit code 2."""


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_str(text: str) -> str:
    return text


def _parse_dims(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


_CONFIG_KEYS = {
    "max_iterations": _parse_int,
    "batch_size": _parse_int,
    "seed": _parse_int,
    "alpha": _parse_float,
    "gamma": _parse_float,
    "nu": _parse_float,
    "loss_kind": _parse_str,
    "input_dim": _parse_int,
    "hidden_dims": _parse_dims,
    "dropout_rate": _parse_float,
    "bn_epsilon": _parse_float,
    "bn_momentum": _parse_float,
    "base_lr": _parse_float,
    "weight_decay": _parse_float,
    "beta1": _parse_float,
    "beta2": _parse_float,
    "adam_epsilon": _parse_float,
    "total_epochs": _parse_int,
    "min_lr": _parse_float,
    "beta_noise": _parse_float,
    "augment_seed": _parse_int,
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat key=value lines; blank lines and # comments are skipped."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise UsageError(f"{source}:{lineno}: duplicate config key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](value)
        except ValueError:
            raise UsageError(
                f"{source}:{lineno}: bad value {value!r} for config key {key!r}"
            ) from None
    return values


def build_configs(values: dict, bank_dim: int) -> tuple[TrainConfig, AugmentConfig]:
    """Assemble the train and augmentation configs from parsed key=values."""
    unknown = set(values) - set(_CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown config key {sorted(unknown)[0]!r}")
    v = dict(values)
    seed = v.get("seed", 8079)
    max_iterations = v.get("max_iterations", 100)
    try:
        mlp = MlpSpec(
            input_dim=v.get("input_dim", bank_dim),
            hidden_dims=v.get("hidden_dims", (512, 256)),
            dropout_rate=v.get("dropout_rate", 0.3),
            bn_epsilon=v.get("bn_epsilon", 1e-5),
            bn_momentum=v.get("bn_momentum", 0.1),
        )
        adamw = AdamWConfig(
            base_lr=v.get("base_lr", 1e-5),
            weight_decay=v.get("weight_decay", 6e-5),
            beta1=v.get("beta1", 0.9),
            beta2=v.get("beta2", 0.999),
            epsilon=v.get("adam_epsilon", 1e-8),
        )
        schedule = CosineSchedule(
            total_epochs=v.get("total_epochs", max_iterations),
            min_lr=v.get("min_lr", 0.0),
        )
        config = TrainConfig(
            max_iterations=max_iterations,
            batch_size=v.get("batch_size", 256),
            seed=seed,
            alpha=v.get("alpha", 0.9),
            gamma=v.get("gamma", 0.6),
            nu=v.get("nu", 0.1),
            beta_noise=v.get("beta_noise", 0.5),
            loss_kind=v.get("loss_kind", "cvar_vs_auc"),
            mlp=mlp,
            adamw=adamw,
            schedule=schedule,
        )
        augment = AugmentConfig(
            beta=config.beta_noise,
            seed=v.get("augment_seed", seed),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return config, augment


def _load_config_values(args) -> dict:
    values: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}")
        values.update(parse_config_text(text, source=args.config))
    for override in getattr(args, "set", None) or []:
        values.update(parse_config_text(override, source="--set"))
    if getattr(args, "loss", None):
        values["loss_kind"] = args.loss
    if getattr(args, "epochs", None) is not None:
        values["max_iterations"] = args.epochs
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "batch_size", None) is not None:
        values["batch_size"] = args.batch_size
    return values


def _load_banks(args) -> tuple[FeatureBank, FeatureBank]:
    if not 0.0 < args.val_fraction < 1.0:
        raise UsageError(f"--val-fraction must be in (0, 1), got {args.val_fraction}")
    train_bank = load_bank(args.train_bank, args.format)
    if args.val_bank:
        val_bank = load_bank(args.val_bank, args.format)
    else:
        train_bank, val_bank = split_bank(train_bank, args.val_fraction, args.split_seed)
    return train_bank, val_bank


def cmd_synth(args) -> int:
    if args.real < 1 or args.fake < 1:
        raise UsageError("--real and --fake must be >= 1")
    if args.dim < 1:
        raise UsageError("--dim must be >= 1")
    if not (np.isfinite(args.sep) and args.sep >= 0):
        raise UsageError("--sep must be finite and >= 0")
    bank = generate_synthetic(args.real, args.fake, args.dim, args.sep, args.seed)
    save_bank(bank, args.out, args.format)
    counts = class_counts(bank)
    ratio = counts.n_fake / counts.n_real
    print(
        f"wrote {args.out}: {len(bank)} samples, dim {bank.dim}, "
        f"{counts.n_real} real / {counts.n_fake} fake (imbalance {ratio:.2f}:1)"
    )
    return 0


def cmd_train(args) -> int:
    values = _load_config_values(args)
    train_bank, val_bank = _load_banks(args)
    config, augment_config = build_configs(values, train_bank.dim)
    if not args.no_augment:
        train_bank = augment_bank(train_bank, augment_config)
    outcome = train(train_bank, val_bank, config)
    os.makedirs(args.out_dir, exist_ok=True)
    best_path = os.path.join(args.out_dir, "best.mlpc")
    final_path = os.path.join(args.out_dir, "final.mlpc")
    log_path = os.path.join(args.out_dir, "train.log")
    report_path = os.path.join(args.out_dir, "val_report.txt")
    save_checkpoint(outcome.best_params, best_path)
    save_checkpoint(outcome.final_params, final_path, opt_state=outcome.final_state)
    with open(log_path, "w", encoding="ascii") as fh:
        fh.write(format_train_log(outcome.records))
    report_text = format_report(outcome.best_record.report)
    with open(report_path, "w", encoding="ascii") as fh:
        fh.write(report_text)
    print(f"best epoch {outcome.best_epoch} (val_auc={outcome.best_record.report.auc!r})")
    print(report_text, end="")
    return 0


def cmd_eval(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    bank = load_bank(args.bank, args.format)
    report = evaluate(params, bank, args.threshold)
    sys.stdout.write(format_report(report))
    if args.roc:
        with open(args.roc, "w", encoding="ascii") as fh:
            fh.write(roc_to_csv(report.roc_points))
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(format_report(report))
    return 0


def cmd_predict(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    bank = load_bank(args.bank, args.format)
    logits = predict_logits(params, bank)
    lines = ["index,logit,prediction"]
    for i, logit in enumerate(logits):
        label = "real" if logit > 0 else "fake"
        lines.append(f"{i},{float(logit)!r},{label}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    if not args.values.strip():
        raise UsageError("--values must list at least one value")
    values = _load_config_values(args)
    train_bank, val_bank = _load_banks(args)
    config, augment_config = build_configs(values, train_bank.dim)
    if not args.no_augment:
        train_bank = augment_bank(train_bank, augment_config)
    try:
        if args.kind == "gamma":
            sweep = [float(part) for part in args.values.split(",") if part.strip()]
            rows = ablate_gamma(train_bank, val_bank, config, sweep)
        else:
            sweep = [int(part) for part in args.values.split(",") if part.strip()]
            rows = ablate_depth(train_bank, val_bank, config, sweep)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    csv_text = ablation_to_csv(args.kind, rows)
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(csv_text)
    else:
        sys.stdout.write(csv_text)
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="config override, repeatable"
    )
    p.add_argument("--loss", choices=LOSS_KINDS, help="loss kind override")
    p.add_argument("--epochs", type=int, help="max_iterations override")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--batch-size", type=int, help="batch_size override")


def _add_bank_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-bank", required=True, help="training bank path")
    p.add_argument("--val-bank", help="validation bank path (default: split from training)")
    p.add_argument(
        "--val-fraction", type=float, default=0.1,
        help="held-out share when no --val-bank is given (default 0.1)",
    )
    p.add_argument(
        "--split-seed", type=int, default=8079,
        help="seed for the fallback validation split (default 8079)",
    )
    p.add_argument("--no-augment", action="store_true", help="skip noise augmentation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synthdetect",
        description="Train and evaluate an imbalance-robust detector of AI-generated "
        "faces on pre-extracted feature vectors.",
    )
    parser.add_argument(
        "--format", choices=("binary", "csv"), default="binary",
        help="bank file format (default binary)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-class bank")
    p.add_argument("--real", type=int, required=True)
    p.add_argument("--fake", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--sep", type=float, default=2.0, help="class mean separation (default 2)")
    p.add_argument("--seed", type=int, default=8079)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detection head")
    _add_bank_flags(p)
    _add_config_flags(p)
    p.add_argument("--out-dir", default=".", help="where checkpoints and logs go")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a bank")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--roc", help="also write the ROC curve to this CSV path")
    p.add_argument("--out", help="also write the report to this path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="per-sample logits and verdicts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="gamma or depth sweep")
    p.add_argument("--kind", choices=("gamma", "depth"), required=True)
    p.add_argument("--values", required=True, help="comma-separated sweep values")
    _add_bank_flags(p)
    _add_config_flags(p)
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (
        BankFormatError,
        CheckpointFormatError,
        NumericError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
