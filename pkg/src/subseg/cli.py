"""Command-line entry point: ``subseg {gen-data,train,eval,predict,ablate}``."""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .core import tsr
from .data import DatasetError, HierarchySpec, SyntheticSpec, make_dataset, read_dataset, write_dataset
from .trainer import (ABLATIONS, DEFAULT_GRID, TrainConfig, apply_overrides, config_to_text,
                      evaluate_samples, load_config, predict, run_ablation, run_experiment)

log = logging.getLogger("subseg")


def _patch(text: str) -> str:
    parts = text.lower().replace("x", ",").split(",")
    if len(parts) not in (1, 2) or not all(p.strip().isdigit() for p in parts):
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return f"{parts[0]}x{parts[-1]}"


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    p.add_argument("--config", help="run.cfg file with defaults (flags override it)")
    p.add_argument("--iters", type=int, help="total SGD iterations (default 4000)")
    p.add_argument("--seed", type=int, help="training seed (default 0)")
    p.add_argument("--n-sub", type=int, help="use only this many of the fine samples")
    p.add_argument("--batch-size", type=int, help="even batch size (default 8)")
    p.add_argument("--patch", type=_patch, help="training crop HxW (default 32x32)")
    p.add_argument("--lr", type=float, help="base learning rate (default 0.01)")
    p.add_argument("--eval-every", type=int, help="validate every N iterations (default 250)")
    p.add_argument("--base-channels", type=int, help="U-Net width (default 16)")
    p.add_argument("--depth", type=int, help="U-Net depth (default 3)")
    p.add_argument("--prior", choices=("logits", "probs"), help="what PC concatenates (default logits)")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows defaults only where they carry information (not for unset overrides or flags)."""

    def _get_help_string(self, action):
        if action.default in (None, False, argparse.SUPPRESS):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _Formatter
    parser = argparse.ArgumentParser(prog="subseg", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=int, default=200, help="training samples")
    g.add_argument("--n-sub", type=int, default=5, help="training samples keeping subclass labels")
    g.add_argument("--n-val", type=int, default=20, help="validation samples")
    g.add_argument("--n-test", type=int, default=40, help="test samples")
    g.add_argument("--k-fg", type=int, default=3, choices=(2, 3), help="foreground subclasses")
    g.add_argument("--size", type=int, default=64, help="image side length")
    g.add_argument("--seed", type=int, default=1, help="generator seed")
    g.add_argument("--force", action="store_true", help="overwrite an existing directory")

    t = sub.add_parser("train", help="train one configuration", formatter_class=fmt)
    _add_train_flags(t)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--pc", action="store_true", help="enable Prior Concatenation")
    t.add_argument("--sn", action="store_true", help="enable Separate Normalization")
    t.add_argument("--hm", action="store_true", help="enable HierarchicalMix")
    t.add_argument("--nl", action="store_true", help="add the negative-learning loss")
    t.add_argument("--unet", action="store_true", help="plain U-Net: no superclass head or coarse data")

    for name, text in (("eval", "print a metrics report for a checkpoint"),
                       ("predict", "write predicted label maps and PGM previews")):
        e = sub.add_parser(name, help=text, formatter_class=fmt)
        e.add_argument("--checkpoint", required=True, help="checkpoint directory (e.g. run/best.ckpt)")
        e.add_argument("--data", required=True, help="dataset directory")
        e.add_argument("--split", default="test", choices=("fine", "val", "test"), help="which samples")
        if name == "eval":
            e.add_argument("--out", help="also write the CSV report here")
            e.add_argument("--table", action="store_true", help="print a readable table instead of CSV")
        else:
            e.add_argument("--out", required=True, help="output directory")

    a = sub.add_parser("ablate", help="run an ablation grid over seeds", formatter_class=fmt)
    _add_train_flags(a)
    a.add_argument("--out", required=True, help="directory for per-run folders and ablation.csv")
    a.add_argument("--configs", type=_csv_list, default=list(DEFAULT_GRID),
                   help=f"comma-separated subset of {','.join(ABLATIONS)}")
    a.add_argument("--seeds", type=_csv_list, default=["0", "1", "2"], help="comma-separated seeds")
    a.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return parser


def _resolve(args, base: TrainConfig) -> TrainConfig:
    cfg = load_config(args.config, base) if args.config else base
    flags = {"total_iters": args.iters, "seed": args.seed, "n_sub": args.n_sub,
             "batch_size": args.batch_size, "patch": args.patch, "base_lr": args.lr,
             "eval_every": args.eval_every, "base_channels": args.base_channels,
             "depth": args.depth, "prior": args.prior}
    overrides = {k: str(v) for k, v in flags.items() if v is not None}
    for flag in ("pc", "sn", "hm", "nl"):
        if getattr(args, flag, False):
            overrides[flag] = "true"
    if getattr(args, "unet", False):
        overrides["superclass_head"] = "false"
    overrides["data_dir"] = args.data
    return apply_overrides(cfg, overrides)


def _echo(cfg: TrainConfig) -> None:
    print("# resolved config")
    print(config_to_text(cfg), end="")


def cmd_gen_data(args) -> int:
    if args.n_sub > args.n:
        raise DatasetError(f"--n-sub {args.n_sub} exceeds --n {args.n}")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DatasetError(f"{out} already exists; use --force to overwrite")
    spec = SyntheticSpec(hierarchy=HierarchySpec.foreground(args.k_fg), size=(args.size, args.size))
    split = make_dataset(args.n, args.n_sub, args.seed, n_val=args.n_val, n_test=args.n_test, spec=spec)
    write_dataset(split, out, force=args.force)
    print(f"wrote {out}: N={args.n} n_sub={len(split.fine)} val={len(split.val)} test={len(split.test)} "
          f"k={','.join(map(str, spec.hierarchy.k))} seed={args.seed}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args, TrainConfig())
    cfg = dataclasses.replace(cfg, out_dir=args.out)
    split = read_dataset(cfg.data_dir)
    if split.hierarchy != cfg.model.hierarchy:
        cfg = apply_overrides(cfg, {"k": ",".join(map(str, split.hierarchy.k))})
    _echo(cfg)
    result = run_experiment(cfg, split)
    print(f"# best validation checkpoint at iteration {result.best_iteration}; test report (hd95 in pixels)")
    print(result.report.to_csv(), end="")
    return 0


def _load_for_data(args):
    split = read_dataset(args.data)
    net, iteration = checkpoint.load_checkpoint(args.checkpoint)
    if net.cfg.hierarchy != split.hierarchy:
        raise DatasetError(f"checkpoint predicts {net.cfg.hierarchy.K} classes (k={net.cfg.hierarchy.k}) "
                           f"but dataset {args.data} has {split.hierarchy.K} (k={split.hierarchy.k})")
    samples = getattr(split, args.split)
    if not samples:
        raise DatasetError(f"dataset {args.data} has no {args.split} samples")
    return net, samples


def cmd_eval(args) -> int:
    net, samples = _load_for_data(args)
    report = evaluate_samples(net, samples)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    print(report.table() if args.table else text, end="\n" if args.table else "")
    return 0


def write_pgm(path: str | os.PathLike, labels: np.ndarray, num_classes: int) -> None:
    """Binary 8-bit PGM with class ``c`` drawn as ``round(c * 255 / (K - 1))``."""
    scale = 255.0 / max(num_classes - 1, 1)
    pixels = np.rint(np.asarray(labels) * scale).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def cmd_predict(args) -> int:
    net, samples = _load_for_data(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds = predict(net, np.stack([s.image for s in samples]))
    for s, p in zip(samples, preds):
        tsr.save(out / f"{s.id}.tsr1", p.astype(np.float32))
        write_pgm(out / f"{s.id}.pgm", p, net.cfg.hierarchy.K)
    print(f"wrote {len(samples)} predictions to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve(args, TrainConfig())
    split = read_dataset(cfg.data_dir)
    if split.hierarchy != cfg.model.hierarchy:
        cfg = apply_overrides(cfg, {"k": ",".join(map(str, split.hierarchy.k))})
    unknown = [c for c in args.configs if c not in ABLATIONS]
    if unknown:
        raise ValueError(f"unknown ablation configs {unknown}; choose from {sorted(ABLATIONS)}")
    try:
        seeds = [int(s) for s in args.seeds]
    except ValueError:
        raise ValueError(f"--seeds must be integers, got {args.seeds}") from None
    _echo(cfg)
    print(f"configs = {','.join(args.configs)}\nseeds = {','.join(map(str, seeds))}")
    rows = run_ablation(cfg, split, names=tuple(args.configs), seeds=tuple(seeds),
                        out_dir=args.out, jobs=args.jobs)
    print((Path(args.out) / "ablation.csv").read_text(), end="")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "ablate": cmd_ablate}


def _thread_limit():
    raw = os.environ.get("SUBSEG_THREADS")
    if not raw:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(raw))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"subseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
