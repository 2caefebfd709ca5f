"""Command line interface: lkmseg train|eval|ablate|kernels|erf|gen-data."""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import tensor as T
from .config import build_configs, parse_schedule, read_config_file
from .data import generate_dataset
from .erf import average_erf, compute_erf, export_erf
from .errors import LkmsegError
from .metrics import mean_foreground_scores
from .model import load_checkpoint, predict_mask
from .pgm import image_to_pgm, mask_to_pgm, write_pgm
from .train import ablation_sweep, evaluate, kernel_sweep, train


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="run seed override")
    p.add_argument("--epochs", type=int, help="epoch count override")
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--precision", choices=["f32", "f64"],
                   help="storage precision override")
    p.add_argument("--kernel-schedule", help="e.g. 8,4,4 (3D: 20x28x24,...)")
    p.add_argument("--no-pim", action="store_true")
    p.add_argument("--no-pam", action="store_true")
    p.add_argument("--no-bim", action="store_true")


def _configure(args):
    raw = read_config_file(args.config) if args.config else {}
    model, scene, optim, run = build_configs(raw)
    if args.seed is not None:
        run.seed = args.seed
        scene.seed = args.seed
    if args.epochs is not None:
        optim = dataclasses.replace(optim, epochs=args.epochs)
    if args.precision is not None:
        run.precision = args.precision
    if args.kernel_schedule:
        model = dataclasses.replace(model,
                                    kernel_schedule=parse_schedule(args.kernel_schedule))
    if args.no_pim:
        model = dataclasses.replace(model, use_pim=False)
    if args.no_pam:
        model = dataclasses.replace(model, use_pam=False)
    if args.no_bim:
        model = dataclasses.replace(model, use_bim=False)
    if run.precision == "f32":
        T.set_default_dtype(np.float32)
    return model, scene, optim, run


def _cmd_train(args) -> int:
    model, scene, optim, run = _configure(args)
    records, best = train(
        model, scene, optim, args.out, seed=run.seed,
        train_count=args.train_count or run.train_count,
        val_count=args.val_count or run.val_count, nsd_tol=run.nsd_tol,
        resume=args.resume,
        early_stop_dsc=args.early_stop_dsc
        if args.early_stop_dsc is not None else run.early_stop_dsc,
        fixed_timing=args.fixed_timing or run.fixed_timing, log=print)
    last = records[-1]
    print(f"final: epoch {last.epoch} loss {last.loss:.4f} "
          f"dsc {last.dsc:.4f} nsd {last.nsd:.4f}")
    print(f"best checkpoint: {best}")
    return 0


def _cmd_eval(args) -> int:
    model_cfg, scene, optim, run = _configure(args)
    model, _, epoch, _ = load_checkpoint(args.checkpoint, model_cfg, run.seed)
    val = generate_dataset(dataclasses.replace(scene, seed=scene.seed + 1),
                           args.count or run.val_count)
    dsc, nsd = evaluate(model, val, model_cfg.num_classes, run.nsd_tol)
    print(f"checkpoint epoch {epoch}: dsc {dsc:.4f} nsd {nsd:.4f}")
    os.makedirs(args.out, exist_ok=True)
    for i, (img, mask) in enumerate(val[:args.dump or 0]):
        pred = predict_mask(model, img[None])[0]
        write_pgm(os.path.join(args.out, f"input_{i:03d}.pgm"), image_to_pgm(img))
        write_pgm(os.path.join(args.out, f"gt_{i:03d}.pgm"),
                  mask_to_pgm(mask, model_cfg.num_classes))
        write_pgm(os.path.join(args.out, f"pred_{i:03d}.pgm"),
                  mask_to_pgm(pred, model_cfg.num_classes))
    with open(os.path.join(args.out, "report.md"), "w") as fh:
        fh.write(f"# Evaluation\n\n| DSC | NSD |\n|---|---|\n"
                 f"| {dsc:.4f} | {nsd:.4f} |\n")
    return 0


def _cmd_ablate(args) -> int:
    model, scene, optim, run = _configure(args)
    rows, report = ablation_sweep(model, scene, optim, args.out, seed=run.seed,
                                  train_count=args.train_count or run.train_count,
                                  val_count=args.val_count or run.val_count,
                                  log=print)
    for name, dsc, nsd, secs in rows:
        print(f"{name:14s} dsc {dsc:.4f} nsd {nsd:.4f} ({secs:.1f}s)")
    print(f"report: {report}")
    return 0


def _cmd_kernels(args) -> int:
    model, scene, optim, run = _configure(args)
    schedules = [parse_schedule(s) for s in args.schedules.split(";")]
    rows, report = kernel_sweep(schedules, model, scene, optim, args.out,
                                seed=run.seed,
                                train_count=args.train_count or run.train_count,
                                val_count=args.val_count or run.val_count,
                                log=print)
    for schedule, dsc, nsd, secs in rows:
        print(f"{schedule} dsc {dsc:.4f} nsd {nsd:.4f} ({secs:.1f}s)")
    print(f"report: {report}")
    return 0


def _cmd_erf(args) -> int:
    model_cfg, scene, optim, run = _configure(args)
    model, _, _, _ = load_checkpoint(args.checkpoint, model_cfg, run.seed)
    target = "center" if args.target == "center" else \
        tuple(int(v) for v in args.target.split(","))
    images = [img for img, _ in
              generate_dataset(dataclasses.replace(scene, seed=scene.seed + 1),
                               max(1, args.average))]
    if args.average > 1:
        erf = average_erf(model, images, target)
    else:
        erf = compute_erf(model, images[0], target)
    export_erf(erf, args.out)
    print(f"erf map written to {args.out}")
    return 0


def _cmd_gen_data(args) -> int:
    _, scene, _, run = _configure(args)
    scenes = generate_dataset(scene, args.count)
    os.makedirs(args.out, exist_ok=True)
    for i, (img, mask) in enumerate(scenes):
        write_pgm(os.path.join(args.out, f"img_{i:04d}.pgm"), image_to_pgm(img))
        write_pgm(os.path.join(args.out, f"mask_{i:04d}.pgm"),
                  mask_to_pgm(mask, scene.num_classes))
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lkmseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on synthetic scenes")
    _add_common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--train-count", type=int)
    p.add_argument("--val-count", type=int)
    p.add_argument("--early-stop-dsc", type=float)
    p.add_argument("--fixed-timing", action="store_true",
                   help="write 0.000 in the seconds column (reproducible CSVs)")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, help="validation scene count")
    p.add_argument("--dump", type=int, default=4,
                   help="how many scenes to export as PGM")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="run the 8-way module ablation")
    _add_common(p)
    p.add_argument("--train-count", type=int)
    p.add_argument("--val-count", type=int)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("kernels", help="kernel-size schedule sweep")
    _add_common(p)
    p.add_argument("--schedules", default="2,2,2;4,2,2;8,4,4",
                   help="semicolon-separated schedules")
    p.add_argument("--train-count", type=int)
    p.add_argument("--val-count", type=int)
    p.set_defaults(fn=_cmd_kernels)

    p = sub.add_parser("erf", help="effective receptive field map")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", default="center", help="center or y,x")
    p.add_argument("--average", type=int, default=1,
                   help="average over N random inputs")
    p.set_defaults(fn=_cmd_erf)

    p = sub.add_parser("gen-data", help="write synthetic scenes as PGM")
    _add_common(p)
    p.add_argument("--count", type=int, default=16)
    p.set_defaults(fn=_cmd_gen_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except LkmsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
