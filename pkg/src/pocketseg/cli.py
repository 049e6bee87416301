"""Command-line orchestration of the full workflow: phantom generation,
preprocessing, cross-validated two-stage training, inference, evaluation,
reporting, and parameter counting."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import nifti
from .config import load_run_config
from .crossval import (compare_presets, read_metrics_csv, run_crossval_stage1,
                       run_crossval_stage2, write_metrics_csv)
from .inference import SlidingWindowConfig, restore_to_original, two_stage_segment
from .metrics import evaluate_case
from .network import ArchSpec, count_parameters, load_checkpoint
from .preprocess import DatasetManifest, preprocess_case, preprocess_dataset
from .phantom import PhantomSampler, generate_dataset
from .report import write_report
from .training import TrainConfig


def _set_deterministic():
    torch.use_deterministic_algorithms(True)


def cmd_phantom(args):
    sampler = PhantomSampler()
    manifest = generate_dataset(args.count, sampler, args.seed, args.out)
    print(f"wrote {len(manifest.cases)} phantom cases to {args.out}")
    return 0


def cmd_preprocess(args):
    cfg = load_run_config(args.config, seed=args.seed)
    manifest = DatasetManifest.load(cfg.path("data_manifest"))
    if not manifest.cases:
        print("error: no cases in manifest", file=sys.stderr)
        return 1
    manifest, failures = preprocess_dataset(manifest, cfg.preprocess, cfg.path("cache_dir"))
    print(f"preprocessed {len(manifest.cases) - len(failures)} cases"
          f" -> {cfg.path('cache_dir')}")
    print(f"median resampled dims: {manifest.median_dims}")
    print(f"derived patch size:    {manifest.patch_size}")
    for cid, msg in failures:
        print(f"FAILED {cid}: {msg}", file=sys.stderr)
    return 1 if failures else 0


def cmd_crossval(args):
    cfg = load_run_config(args.config, preset=args.preset, seed=args.seed)
    if args.deterministic:
        _set_deterministic()
    manifest = DatasetManifest.load(cfg.path("cache_dir") / "manifest.json")
    sw = SlidingWindowConfig(manifest.patch_size, overlap=cfg.overlap, blend=cfg.blend)
    out_dir = cfg.path("output_dir")
    if args.stage == 1:
        res = run_crossval_stage1(manifest, cfg.path("cache_dir"),
                                  out_dir / "stage1", cfg.arch_stage1, cfg.train, sw)
        print(f"stage 1 mean organ DSC over {len(res.case_metrics)} held-out cases: "
              f"{res.mean_dsc('organ'):.4f}")
    else:
        res = run_crossval_stage2(manifest, cfg.path("cache_dir"),
                                  out_dir / "stage2", cfg.arch_stage2, cfg.train,
                                  out_dir / "stage1", cfg.stage2_mode, sw)
        print(f"stage 2 mean organ DSC: {res.mean_dsc('organ'):.4f}, "
              f"mean tumor DSC: {res.mean_dsc('tumor'):.4f}")
        print(f"containment violations: {res.containment_violations}")
        if res.containment_violations:
            return 1
    return 0


def cmd_train(args):
    """Single training run (no folds): cases tagged 'val' validate the rest."""
    from .training import TrainCase, train as run_train
    from .preprocess import load_cached_case

    cfg = load_run_config(args.config, preset=args.preset, seed=args.seed)
    if args.deterministic:
        _set_deterministic()
    manifest = DatasetManifest.load(cfg.path("cache_dir") / "manifest.json")
    arch = cfg.arch_stage1 if args.stage == 1 else cfg.arch_stage2
    if args.stage == 2 and cfg.stage2_mode == "image+mask":
        print("error: single-run training supports stage 2 only in single-channel "
              "mode; use crossval for the two-channel pipeline", file=sys.stderr)
        return 1

    def to_case(rec):
        image, label = load_cached_case(cfg.path("cache_dir"), rec.case_id)
        lab = label.data if args.stage == 2 else (label.data >= 1).astype(np.int16)
        return TrainCase(rec.case_id, image.data, lab)

    train_cases = [to_case(r) for r in manifest.cases if r.split_tag != "val"]
    val_cases = [to_case(r) for r in manifest.cases if r.split_tag == "val"]
    from .network import build_network
    from .crossval import _effective_arch
    net = build_network(_effective_arch(arch, cfg.train), seed=cfg.train.seed)
    out_dir = cfg.path("output_dir") / f"train_stage{args.stage}"
    _, history = run_train(net, train_cases, cfg.train, val_cases=val_cases,
                           patch_size=manifest.patch_size, run_dir=out_dir)
    print(f"trained {cfg.train.epochs} epochs; artifacts in {out_dir}")
    return 0


def cmd_infer(args):
    cfg = load_run_config(args.config, seed=args.seed)
    if args.deterministic:
        _set_deterministic()
    organ_net, _ = load_checkpoint(args.organ_checkpoint)
    tumor_net, _ = load_checkpoint(args.tumor_checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    patch = organ_net.spec.downsample_factor
    manifest = None
    cache = Path(cfg.paths.get("cache_dir", "")) if "cache_dir" in cfg.paths else None
    if cache and (cache / "manifest.json").exists():
        manifest = DatasetManifest.load(cache / "manifest.json")
    patch_size = manifest.patch_size if manifest else tuple(
        int(p) for p in args.patch_size.split(","))
    sw = SlidingWindowConfig(patch_size, overlap=cfg.overlap, blend=cfg.blend)

    for image_path in args.images:
        image_path = Path(image_path)
        original = nifti.read_volume(image_path)
        image, _ = preprocess_case(original, None, cfg.preprocess)
        result = two_stage_segment(image, organ_net, tumor_net, sw,
                                   stage2_mode=cfg.stage2_mode)
        restored = restore_to_original(result.final_labels, original.dims,
                                       original.geometry)
        name = image_path.name.replace(".nii.gz", "").replace(".nii", "")
        out_path = out_dir / f"{name}_pred.nii"
        nifti.write_volume(restored, out_path, dtype=np.uint8)
        print(f"{image_path} -> {out_path}")
    return 0


def cmd_evaluate(args):
    rows = []
    manifest = DatasetManifest.load(args.manifest)
    for rec in manifest.cases:
        if rec.label_path is None:
            continue
        pred_path = Path(args.pred_dir) / f"{rec.case_id}_image_pred.nii"
        if not pred_path.exists():
            print(f"error: missing prediction {pred_path}", file=sys.stderr)
            return 1
        pred = nifti.read_label_volume(pred_path)
        gt = nifti.read_label_volume(rec.label_path)
        rows.append((0, evaluate_case(pred, gt, case_id=rec.case_id)))
    write_metrics_csv(args.out, rows)
    print(f"wrote per-case metrics for {len(rows)} cases to {args.out}")
    return 0


def cmd_report(args):
    datasets = {}
    for entry in args.metrics:
        if "=" in entry:
            name, path = entry.split("=", 1)
        else:
            name, path = Path(entry).stem, entry
        datasets[name] = [m for _, m in read_metrics_csv(path)]
    if not any(datasets.values()):
        print("error: metrics tables contain no cases", file=sys.stderr)
        return 1
    paths = write_report(datasets, args.out)
    print(Path(paths["summary"]).read_text(), end="")
    print(f"figure: {paths['figure']}")
    return 0


def cmd_param_count(args):
    width = args.width
    print(f"{'levels':>7} {'pocket':>12} {'doubling':>12} {'ratio':>8}")
    for levels in args.levels:
        pocket = count_parameters(ArchSpec(levels=levels, width=width,
                                           in_channels=args.in_channels,
                                           out_classes=args.out_classes,
                                           widening="pocket"))
        doubling = count_parameters(ArchSpec(levels=levels, width=width,
                                             in_channels=args.in_channels,
                                             out_classes=args.out_classes,
                                             widening="doubling"))
        print(f"{levels:>7} {pocket:>12} {doubling:>12} {doubling / pocket:>8.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pocketseg")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--preset", choices=("default", "customized"), default=None)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="standardize and cache a dataset")
    add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("crossval", help="k-fold training for one stage")
    add_common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("train", help="single training run on the split tags")
    add_common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="two-stage inference on images")
    add_common(p)
    p.add_argument("--organ-checkpoint", required=True)
    p.add_argument("--tumor-checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", default="32,32,16",
                   help="fallback when no cached manifest provides one")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summary table and boxplot figures")
    p.add_argument("--metrics", nargs="+", required=True,
                   help="metrics CSVs, optionally name=path")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("param-count", help="pocket vs doubling parameter totals")
    p.add_argument("--levels", type=int, nargs="+", default=[2, 3, 4, 5])
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--in-channels", type=int, default=1)
    p.add_argument("--out-classes", type=int, default=2)
    p.set_defaults(func=cmd_param_count)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface failures as nonzero exit status
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
