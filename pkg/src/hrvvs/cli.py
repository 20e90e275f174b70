"""Command-line entry points: synth, pretrain-var, train, eval, infer, ablate."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .checkpoint import save_checkpoint
from .config import RunConfig, desk_profile
from .datasets import SynthConfig, load_dataset, synth_generate, split_records
from .train import ablate, evaluate, infer, set_determinism, train
from .metrics import METRIC_NAMES


def _load_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.from_file(args.config)
    else:
        cfg = desk_profile()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for flag in ("no_var", "no_msim", "no_dwfm"):
        if getattr(args, flag, False):
            overrides[flag] = True
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "max_steps", None) is not None:
        overrides["max_steps"] = args.max_steps
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _add_common_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (full key validation)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-var", dest="no_var", action="store_true", help="disable the prior branch")
    p.add_argument("--no-msim", dest="no_msim", action="store_true", help="bypass the interaction module")
    p.add_argument("--no-dwfm", dest="no_dwfm", action="store_true", help="use all-ones fusion weights")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hrvvs",
        description="High-resolution video vasculature segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic vasculature video dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=int, default=4)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--tubes", type=int, default=2)
    p.add_argument("--distractors", type=int, default=2)
    p.add_argument("--jump-prob", type=float, default=0.1)
    p.add_argument("--brightness", type=float, default=0.08)

    p = sub.add_parser("pretrain-var", help="pretrain the autoregressive prior model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None, help="override config pretrain steps")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train the segmentation network")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--var-checkpoint", type=Path, default=None)
    _add_common_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint and emit metric reports")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dump-masks", action="store_true")

    p = sub.add_parser("infer", help="segment a directory of frames")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--frames", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="train/evaluate all five component combinations")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--eval-split", default=None, choices=(None, "train", "val", "test"))
    _add_common_train_flags(p)

    return parser


def _cmd_synth(args: argparse.Namespace) -> int:
    cfg = SynthConfig(
        seed=args.seed,
        num_videos=args.videos,
        frames_per_video=args.frames,
        resolution=args.resolution,
        tube_count=args.tubes,
        distractor_count=args.distractors,
        jump_probability=args.jump_prob,
        brightness_amplitude=args.brightness,
    )
    dirs = synth_generate(cfg, args.out)
    print(f"wrote {len(dirs)} videos x {cfg.frames_per_video} frames to {args.out}")
    return 0


def _cmd_pretrain_var(args: argparse.Namespace) -> int:
    from .model import HrvvsNet
    from .train import _prior_corpus
    from .toyvar import pretrain as pretrain_toyvar

    config = _load_config(args)
    set_determinism(config.seed)
    records = load_dataset(args.data)
    splits = split_records(records, config.seed)
    net = HrvvsNet(config)
    steps = args.steps if args.steps is not None else config.var_pretrain_steps
    history = pretrain_toyvar(
        net.prior,
        _prior_corpus(splits["train"], net.prior.schedule.native_side),
        steps=steps,
        lr=config.var_pretrain_lr,
        seed=config.seed,
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, net.prior.state_dict(), config, steps)
    if history["total"]:
        print(f"pretrained {steps} steps: loss {history['total'][0]:.4f} -> {history['total'][-1]:.4f}")
    print(f"saved prior checkpoint to {args.out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    result = train(config, args.data, args.out, var_checkpoint=args.var_checkpoint)
    last = result["log"][-1]["loss"] if result["log"] else float("nan")
    print(f"trained {result['steps']} steps (final loss {last:.4f}); checkpoint in {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    report = evaluate(args.checkpoint, args.data, args.split, args.out, dump_masks=args.dump_masks)
    summary = "  ".join(f"{name}={report.mean[name]:.4f}" for name in METRIC_NAMES)
    print(f"{args.split}: {summary}")
    print(f"reports written to {args.out}")
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    written = infer(args.checkpoint, args.frames, args.out)
    print(f"wrote {len(written)} masks and overlays to {args.out}")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    rows = ablate(config, args.data, args.out, eval_split=args.eval_split)
    header = f"{'Design':<8}{'VAR':<5}{'MSIM':<6}{'DWFM':<6}" + "".join(
        f"{name:>10}" for name in METRIC_NAMES
    )
    print(header)
    for row in rows:
        flags = "".join(
            f"{'x' if row[k] else '-':<{width}}" for k, width in (("VAR", 5), ("MSIM", 6), ("DWFM", 6))
        )
        vals = "".join(f"{row[name]:>10.4f}" for name in METRIC_NAMES)
        print(f"{row['design']:<8}{flags}{vals}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "pretrain-var": _cmd_pretrain_var,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "ablate": _cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
