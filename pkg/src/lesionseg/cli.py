"""Command-line workflow: gen-data | train | eval | predict | gradcheck.

Configuration is a flat key=value text file ('#' starts a comment). Every key
has a default; unknown keys are a hard error so typos cannot silently fall
back. --set key=value overrides individual entries from the command line.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, ConfigError, load_checkpoint, save_checkpoint
from .data import (
    DatasetError,
    SynthConfig,
    gen_synthetic,
    load_dataset,
    read_manifest,
    split_dataset,
    write_manifest,
    write_mask,
    write_sample,
)
from .metrics import summary_table, write_ja_histogram, write_metrics_csv
from .model import (
    ModelConfig,
    config_echo,
    config_from_echo,
    predict_mask,
)
from .training import TrainConfig, evaluate, train, write_loss_log

DEFAULTS: dict[str, str] = {
    "seed": "0",
    "image_size": "64",
    # encoder
    "backbone.channels": "8,16,32,32,32",
    "backbone.strides": "1,2,2,1,1",
    "backbone.reduce": "16",
    "backbone.in_channels": "3",
    # dilated bank and bi-directional refinement (published rate schedule)
    "bank.rates": "3,6,12,18,24",
    "bank.channels": "16",
    "bidfl.fusion": "concat_all",
    "bidfl.reducer_relu": "true",
    "bidfl.bank_relu": "true",
    # consistency fusion
    "mcdf.windows": "3,3,3,5,7,9,11,13,15,17",
    "mcdf.sigma_sq": "10",
    "mcdf.stop_grad_alpha": "false",
    # optimization
    "train.base_lr": "1e-3",
    "train.power": "0.9",
    "train.max_iter": "1000",
    "train.batch_size": "4",
    "train.class_weights": "0.8,0.2",
    "train.momentum": "0",
    "train.augment": "true",
    "train.use_bidfl": "true",
    "train.use_mcdf": "true",
    "train.split": "0.8",
    # synthetic data
    "synth.count": "200",
    "synth.size": "64",
    "synth.lesion_fraction": "0.05,0.4",
    "synth.contrast": "0.25,0.6",
    "synth.noise_std": "0.03",
    "synth.hair_prob": "0.3",
}

ABLATIONS = {
    "baseline": (False, False),
    "bidfl": (True, False),
    "mcdf": (False, True),
    "bidfl+mcdf": (True, True),
}


class UsageError(ValueError):
    pass


def parse_config(path: str | None, overrides: list[str] | None = None) -> dict[str, str]:
    config = dict(DEFAULTS)
    entries: list[tuple[str, str]] = []
    if path:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = stripped.partition("=")
            entries.append((key.strip(), value.strip()))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        entries.append((key.strip(), value.strip()))
    for key, value in entries:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        config[key] = value
    return config


def _ints(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.split(","))


def _floats(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in value.split(","))


def _bool(value: str) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def synth_config(cfg: dict[str, str]) -> SynthConfig:
    return SynthConfig(
        count=int(cfg["synth.count"]),
        size=int(cfg["synth.size"]),
        seed=int(cfg["seed"]),
        lesion_fraction=_floats(cfg["synth.lesion_fraction"]),
        contrast=_floats(cfg["synth.contrast"]),
        noise_std=float(cfg["synth.noise_std"]),
        hair_prob=float(cfg["synth.hair_prob"]),
    )


def model_config(cfg: dict[str, str]) -> ModelConfig:
    backbone = BackboneConfig(
        channels=_ints(cfg["backbone.channels"]),
        strides=_ints(cfg["backbone.strides"]),
        reduce_channels=int(cfg["backbone.reduce"]),
        in_channels=int(cfg["backbone.in_channels"]),
    )
    return ModelConfig(
        backbone=backbone,
        rates=_ints(cfg["bank.rates"]),
        bank_channels=int(cfg["bank.channels"]),
        windows=_ints(cfg["mcdf.windows"]),
        fusion=cfg["bidfl.fusion"],
        reducer_relu=_bool(cfg["bidfl.reducer_relu"]),
        bank_relu=_bool(cfg["bidfl.bank_relu"]),
    )


def train_config(cfg: dict[str, str], ablation: str | None = None) -> TrainConfig:
    use_bidfl = _bool(cfg["train.use_bidfl"])
    use_mcdf = _bool(cfg["train.use_mcdf"])
    if ablation is not None:
        use_bidfl, use_mcdf = ABLATIONS[ablation]
    return TrainConfig(
        model=model_config(cfg),
        base_lr=float(cfg["train.base_lr"]),
        power=float(cfg["train.power"]),
        max_iter=int(cfg["train.max_iter"]),
        class_weights=_floats(cfg["train.class_weights"]),
        sigma_sq=float(cfg["mcdf.sigma_sq"]),
        seed=int(cfg["seed"]),
        batch_size=int(cfg["train.batch_size"]),
        use_bidfl=use_bidfl,
        use_mcdf=use_mcdf,
        momentum=float(cfg["train.momentum"]),
        augment=_bool(cfg["train.augment"]),
        stop_grad_alpha=_bool(cfg["mcdf.stop_grad_alpha"]),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = parse_config(args.config, args.set)
    samples = gen_synthetic(synth_config(cfg))
    out = Path(args.out)
    for sample in samples:
        write_sample(sample, out, fmt=args.format)
    train_split, val_split = split_dataset(samples, float(cfg["train.split"]),
                                           int(cfg["seed"]))
    val_ids = {s.id for s in val_split}
    write_manifest(out, [(s.id, "val" if s.id in val_ids else "train")
                         for s in samples])
    print(f"wrote {len(samples)} samples to {out} "
          f"({len(train_split)} train / {len(val_split)} val)")
    return 0


def _load_split(data_dir: str, size: int) -> tuple[list, list]:
    samples = load_dataset(data_dir, size=size)
    if not samples:
        raise DatasetError(f"no samples under {data_dir}")
    manifest = read_manifest(data_dir)
    if manifest:
        train_set = [s for s in samples if manifest.get(s.id) != "val"]
        val_set = [s for s in samples if manifest.get(s.id) == "val"]
    else:
        train_set, val_set = split_dataset(samples, 0.8, seed=0)
    return train_set, val_set


def cmd_train(args) -> int:
    cfg = parse_config(args.config, args.set)
    tc = train_config(cfg, args.ablation)
    train_set, _ = _load_split(args.data, int(cfg["image_size"]))
    state, records = train(train_set, tc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = config_echo(tc.model, tc.use_bidfl, tc.use_mcdf, tc.sigma_sq, tc.seed)
    save_checkpoint(out / "checkpoint.ckpt", state.parameters, echo)
    write_loss_log(out / "loss_log.csv", records)
    print(f"trained {tc.max_iter} iterations "
          f"(final loss {records[-1].loss:.6f}, running {state.running_loss:.6f})")
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = parse_config(args.config, args.set)
    params, echo = load_checkpoint(args.checkpoint)
    mc, use_bidfl, use_mcdf, sigma_sq = config_from_echo(echo)
    if args.ablation is not None:
        want = ABLATIONS[args.ablation]
        if want != (use_bidfl, use_mcdf):
            raise ConfigError(
                f"checkpoint was trained with ablation "
                f"bidfl={use_bidfl}/mcdf={use_mcdf}, not {args.ablation!r}")
    train_set, val_set = _load_split(args.data, int(cfg["image_size"]))
    chosen = {"val": val_set, "train": train_set,
              "all": train_set + val_set}[args.split]
    if not chosen:
        raise DatasetError(f"split {args.split!r} is empty")
    report, ids = evaluate(chosen, params, mc, use_bidfl, use_mcdf, sigma_sq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", ids, report.entries)
    write_ja_histogram(out / "ja_histogram.csv", report.entries)
    label = f"bidfl={'on' if use_bidfl else 'off'},mcdf={'on' if use_mcdf else 'off'}"
    text = summary_table(report, label=label)
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_predict(args) -> int:
    cfg = parse_config(args.config, args.set)
    params, echo = load_checkpoint(args.checkpoint)
    mc, use_bidfl, use_mcdf, sigma_sq = config_from_echo(echo)
    samples = load_dataset(args.input, size=int(cfg["image_size"]))
    if not samples:
        raise DatasetError(f"no samples under {args.input}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        mask = predict_mask(sample.image, params, mc, use_bidfl, use_mcdf, sigma_sq)
        write_mask(mask, out / f"{sample.id}.pgm")
    print(f"wrote {len(samples)} predicted masks to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    results = run_suite()
    worst = 0.0
    for name, err in results:
        status = "ok" if err < args.tol else "FAIL"
        worst = max(worst, err)
        print(f"{status:4s} {name:32s} max relative error {err:.3e}")
    print(f"worst case {worst:.3e} (tolerance {args.tol:.0e})")
    return 0 if worst < args.tol else 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="lesionseg",
                     description="Desk-scale lesion segmentation workflow")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("ppm", "png"), default="ppm")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write checkpoint + loss log")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=sorted(ABLATIONS), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, write metric reports")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--ablation", choices=sorted(ABLATIONS), default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predicted masks for a directory")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage()
            return 1
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ConfigError, DatasetError, FileNotFoundError, ValueError,
            RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
