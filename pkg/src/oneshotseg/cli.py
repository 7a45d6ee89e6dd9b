"""Command-line entry point: gen-data, pretrain, finetune, eval, infer, ablate."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import nets, pipeline
from .config import ConfigError, ConfigFile, config_to_dict, load_config
from .diffops import NumericalError, ShapeError
from .metrics import evaluate, predict
from .synth import SyntheticCase, deform_sample, generate_phantom
from .train import finetune_stage2, load_checkpoint, pretrain_stage1, save_checkpoint
from .volume import (AtlasPair, VolumeFormatError, read_labels, read_volume, write_field,
                     write_labels, write_volume)

log = logging.getLogger("oneshotseg")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- data dirs

def _rel(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix()


def cmd_gen_data(args, cfg: ConfigFile) -> None:
    spec = cfg.synthetic if args.seed is None else replace(cfg.synthetic, seed=args.seed)
    for name in ("count_pre", "count_fin", "count_test"):
        if getattr(args, name) < 0:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 0")
    atlas = generate_phantom(spec)  # validates the spec before anything touches disk
    root = Path(args.out_dir)
    for sub in ("atlas", "pre", "fin", "test", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    manifest = {"seed": spec.seed, "synthetic": dataclasses.asdict(spec),
                "atlas": {"image": "atlas/image.rrlv", "labels": "atlas/labels.rrlv"},
                "pre": [], "fin": [], "test": []}
    write_volume(root / "atlas/image.rrlv", atlas.image)
    write_labels(root / "atlas/labels.rrlv", atlas.labels)
    splits = (("pre", args.count_pre, pipeline.PRE_OFFSET),
              ("fin", args.count_fin, pipeline.FIN_OFFSET),
              ("test", args.count_test, pipeline.TEST_OFFSET))
    for split, count, offset in splits:
        for i in range(count):
            case = deform_sample(atlas, spec, offset + i)
            img = root / split / f"{split}_{i:03d}.rrlv"
            write_volume(img, case.image)
            if split == "test":
                gt = root / "gt" / f"{split}_{i:03d}.rrlv"
                write_labels(gt, case.hidden_gt)
                manifest["test"].append({"image": _rel(img, root), "gt": _rel(gt, root)})
            else:
                manifest[split].append(_rel(img, root))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote atlas, %d pre, %d fin, %d test volumes to %s",
             args.count_pre, args.count_fin, args.count_test, root)


def load_manifest(data_dir) -> dict:
    root = Path(data_dir)
    try:
        return json.loads((root / "manifest.json").read_text())
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"{root}/manifest.json: {e}") from e


def load_atlas(data_dir) -> AtlasPair:
    root = Path(data_dir)
    return AtlasPair(read_volume(root / "atlas/image.rrlv"), read_labels(root / "atlas/labels.rrlv"))


def _split_volumes(data_dir, split: str):
    root = Path(data_dir)
    paths = load_manifest(root)[split]
    if not paths:
        raise UsageError(f"{root}: split {split!r} is empty")
    return [read_volume(root / p) for p in paths]


def _runlog_path(ckpt) -> Path:
    return Path(str(ckpt) + ".runlog.csv")


# ---------------------------------------------------------------- training

def cmd_pretrain(args, cfg: ConfigFile) -> None:
    model_cfg = cfg.model_config()
    atlas = load_atlas(args.data_dir)
    volumes = _split_volumes(args.data_dir, "pre")
    if args.resume:
        bundle, opt_states = load_checkpoint(args.resume, model_cfg)
    else:
        bundle = nets.init_bundle(model_cfg, cfg.pretrain.seed, cfg.model.teacher_weights)
        opt_states = None
    bundle, opt_states, runlog = pretrain_stage1(cfg.pretrain, model_cfg, atlas, volumes,
                                                 bundle, opt_states)
    save_checkpoint(args.out_ckpt, bundle, opt_states)
    runlog.write_csv(_runlog_path(args.out_ckpt), append=bool(args.resume))


def _finetune_cfg(args, cfg: ConfigFile):
    ft = cfg.finetune
    if args.no_ema and args.ema_dir:
        raise UsageError("--no-ema and --ema-dir are mutually exclusive")
    if args.no_ema:
        ft = replace(ft, ema="none")
    elif args.ema_dir:
        ft = replace(ft, ema=args.ema_dir)
    if args.no_prompt:
        ft = replace(ft, prompt=False)
    return ft


def cmd_finetune(args, cfg: ConfigFile) -> None:
    ft = _finetune_cfg(args, cfg)
    model_cfg = cfg.model_config()
    atlas = load_atlas(args.data_dir)
    volumes = _split_volumes(args.data_dir, "fin")
    bundle, opt_states = load_checkpoint(args.init_ckpt, model_cfg)
    # stage-1 optimizer moments do not carry over; stage-2 ones do on --resume
    opt_states = {k: v for k, v in opt_states.items() if k.startswith("ft_")} if args.resume else {}
    bundle, opt_states, runlog = finetune_stage2(ft, atlas, volumes, bundle, opt_states)
    save_checkpoint(args.out_ckpt, bundle, opt_states)
    runlog.write_csv(_runlog_path(args.out_ckpt), append=bool(args.resume))


# ---------------------------------------------------------------- eval / infer

def _load_for_inference(ckpt, cfg: ConfigFile | None):
    model_cfg = cfg.model_config() if cfg else nets.infer_model_config(nets.read_tensors(ckpt))
    bundle, _ = load_checkpoint(ckpt, model_cfg)
    return bundle


def cmd_eval(args, cfg: ConfigFile | None) -> None:
    bundle = _load_for_inference(args.ckpt, cfg)
    root = Path(args.data_dir)
    atlas = load_atlas(root)
    entries = load_manifest(root)["test"]
    if not entries:
        raise UsageError(f"{root}: no test cases")
    cases, ids = [], []
    for e in entries:
        gt = read_labels(root / e["gt"])
        cases.append(SyntheticCase(read_volume(root / e["image"]), gt, None))
        ids.append(Path(e["image"]).stem)
    _check_bundle_fits(bundle, atlas)
    include_bg = cfg.metrics.include_background if cfg else False
    report = evaluate(bundle, cases, atlas, use_prompt=not args.no_prompt,
                      include_background=include_bg, case_ids=ids)
    report.write_csv(args.out_csv)
    print(report.summary())


def _check_bundle_fits(bundle, atlas: AtlasPair) -> None:
    if bundle.cfg.num_classes != atlas.labels.num_classes:
        raise ShapeError(f"checkpoint segments {bundle.cfg.num_classes} classes, "
                         f"atlas has {atlas.labels.num_classes}")


def cmd_infer(args, cfg: ConfigFile | None) -> None:
    bundle = _load_for_inference(args.ckpt, cfg)
    atlas = load_atlas(args.atlas)
    _check_bundle_fits(bundle, atlas)
    image = read_volume(args.in_volume)
    if image.dims != atlas.image.dims:
        raise ShapeError(f"input dims {image.dims} differ from atlas {atlas.image.dims}")
    labels, phi = predict(bundle, image, atlas, use_prompt=not args.no_prompt)
    write_labels(args.out_labels, labels)
    if args.out_field:
        write_field(args.out_field, phi[0].numpy())


def cmd_ablate(args, cfg: ConfigFile) -> None:
    rows = pipeline.run_ablation(cfg.synthetic, cfg.model_config(), cfg.pretrain, cfg.finetune,
                                 seeds=args.seeds,
                                 counts=(args.count_pre, args.count_fin, args.count_test))
    summary = pipeline.write_ablation_csv(args.out_csv, rows)
    for s in summary:
        print(f"{s['variant']:>12}  S-Dice {s['s_dice_mean']:.4f} ± {s['s_dice_std']:.4f}  "
              f"R-Dice {s['r_dice_mean']:.4f} ± {s['r_dice_std']:.4f}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oneshotseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write atlas, unlabeled splits and test cases")
    g.add_argument("--config")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--count-pre", type=int, default=8)
    g.add_argument("--count-fin", type=int, default=16)
    g.add_argument("--count-test", type=int, default=8)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="stage 1: distillation + joint registration/segmentation")
    t.add_argument("--config")
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--resume", metavar="CKPT", help="continue a stage-1 checkpoint")
    t.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="stage 2: mutual-EMA fine-tuning with auto-prompting")
    f.add_argument("--config")
    f.add_argument("--data-dir", required=True)
    f.add_argument("--init-ckpt", required=True)
    f.add_argument("--out-ckpt", required=True)
    f.add_argument("--no-ema", action="store_true", help="disable both EMA updates")
    f.add_argument("--ema-dir", choices=("s2t", "t2s", "mutual"))
    f.add_argument("--no-prompt", action="store_true")
    f.add_argument("--resume", action="store_true",
                   help="--init-ckpt is a stage-2 checkpoint; keep its optimizer state")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="score a checkpoint on the test split")
    e.add_argument("--config")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data-dir", required=True)
    e.add_argument("--out-csv", required=True)
    e.add_argument("--no-prompt", action="store_true")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment and register one volume")
    i.add_argument("--config")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in-volume", required=True)
    i.add_argument("--atlas", required=True, help="directory holding atlas/image.rrlv, atlas/labels.rrlv")
    i.add_argument("--out-labels", required=True)
    i.add_argument("--out-field")
    i.add_argument("--no-prompt", action="store_true")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablate", help="run every ablation variant over several seeds")
    a.add_argument("--config")
    a.add_argument("--out-csv", required=True)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--count-pre", type=int, default=8)
    a.add_argument("--count-fin", type=int, default=16)
    a.add_argument("--count-test", type=int, default=8)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        needs_cfg = args.command in ("gen-data", "pretrain", "finetune", "ablate")
        cfg = load_config(args.config) if (needs_cfg or args.config) else None
        args.func(args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, VolumeFormatError, nets.CheckpointError, ShapeError, KeyError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
