"""Two-stage cross-validation harness.

Stage 1 trains organ models per fold and writes out-of-fold organ
predictions for every case (each case is predicted by the fold that held it
out). Stage 2 trains tumor models, optionally consuming the stage-1
out-of-fold masks as a second input channel, and evaluates held-out cases
through the full constrained two-stage pipeline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import storage
from .inference import (SlidingWindowConfig, largest_component,
                        sliding_window_predict, stage2_input, two_stage_segment)
from .metrics import CaseMetrics, dice, evaluate_case, haus95
from .network import ArchSpec, build_network, load_checkpoint
from .preprocess import DatasetManifest, load_cached_case
from .training import TrainCase, TrainConfig, make_folds, train
from .volume import LabelVolume


@dataclass
class CrossvalResult:
    stage: int
    fold_dirs: list
    case_metrics: list                  # CaseMetrics, one per held-out case
    containment_violations: int = 0

    def mean_dsc(self, which: str) -> float:
        vals = [getattr(m, f"dsc_{which}") for m in self.case_metrics
                if getattr(m, f"dsc_{which}") is not None]
        return float(np.mean(vals)) if vals else float("nan")


def _effective_arch(arch: ArchSpec, cfg: TrainConfig) -> ArchSpec:
    if not cfg.deep_supervision and arch.deep_supervision_heads:
        return replace(arch, deep_supervision_heads=0)
    return arch


def write_metrics_csv(path, rows) -> None:
    """rows: (fold, CaseMetrics) pairs. None metrics are left blank."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "fold", "dsc_organ", "dsc_tumor",
                         "haus95_organ", "haus95_tumor"])
        for fold, m in rows:
            fmt = lambda v: "" if v is None else f"{v:.10g}"
            writer.writerow([m.case_id, fold, fmt(m.dsc_organ), fmt(m.dsc_tumor),
                             fmt(m.haus95_organ), fmt(m.haus95_tumor)])


def read_metrics_csv(path):
    """Inverse of write_metrics_csv: list of (fold, CaseMetrics)."""
    rows = []
    with Path(path).open() as fh:
        for rec in csv.DictReader(fh):
            parse = lambda v: None if v == "" else float(v)
            rows.append((int(rec["fold"]), CaseMetrics(
                case_id=rec["case_id"],
                dsc_organ=parse(rec["dsc_organ"]),
                dsc_tumor=parse(rec["dsc_tumor"]),
                haus95_organ=parse(rec["haus95_organ"]),
                haus95_tumor=parse(rec["haus95_tumor"]),
            )))
    return rows


def _load_cases(cache_dir, case_ids):
    cases = {}
    for cid in case_ids:
        image, label = load_cached_case(cache_dir, cid)
        if label is None:
            raise ValueError(f"case {cid} has no label; cannot train")
        cases[cid] = (image, label)
    return cases


def jitter_mask(mask: np.ndarray, rng) -> np.ndarray:
    """Simulated annotation variability: one-voxel dilation or erosion."""
    mask = np.asarray(mask) > 0
    if rng.random() < 0.5:
        out = ndimage.binary_dilation(mask)
    else:
        out = ndimage.binary_erosion(mask)
    return out.astype(np.int16)


def run_crossval_stage1(manifest: DatasetManifest, cache_dir, out_dir,
                        arch: ArchSpec, cfg: TrainConfig,
                        sw_cfg: SlidingWindowConfig | None = None,
                        select: str = "best",
                        train_label_jitter_seed: int | None = None) -> CrossvalResult:
    """Five-fold (configurable) organ training with out-of-fold predictions.

    Per fold: train a binary organ model, predict the held-out cases, keep
    the largest component, store the mask, and score DSC/Haus95 against the
    organ ground truth (label >= 1). ``select`` picks the checkpoint used
    for the held-out predictions. ``train_label_jitter_seed`` optionally
    perturbs the training labels (one-voxel dilation/erosion per case, a
    stand-in for annotation variability); validation labels stay clean.
    """
    out_dir = Path(out_dir)
    arch = _effective_arch(arch, cfg)
    if arch.out_classes != 2:
        raise ValueError(f"stage-1 arch must have 2 output classes, got {arch.out_classes}")
    patch_size = manifest.patch_size
    if patch_size is None:
        raise ValueError("manifest has no derived patch size; run preprocessing first")
    if sw_cfg is None:
        sw_cfg = SlidingWindowConfig(patch_size)

    cases = _load_cases(cache_dir, manifest.case_ids())
    jittered = {}
    if train_label_jitter_seed is not None:
        jrng = np.random.default_rng(train_label_jitter_seed)
        for cid in manifest.case_ids():
            jittered[cid] = jitter_mask(cases[cid][1].data >= 1, jrng)
    folds = make_folds(manifest.case_ids(), cfg.folds, cfg.seed)
    oof_dir = out_dir / "stage1_oof"
    oof_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    fold_dirs = []
    for split in folds:
        fold_dir = out_dir / f"fold_{split.fold_index}"
        fold_dirs.append(fold_dir)
        rng = np.random.default_rng(cfg.seed * 1000 + split.fold_index)

        def organ_case(cid, training):
            image, label = cases[cid]
            if training and cid in jittered:
                return TrainCase(cid, image.data, jittered[cid])
            return TrainCase(cid, image.data, (label.data >= 1).astype(np.int16))

        train_cases = [organ_case(cid, True) for cid in split.train_ids]
        val_cases = [organ_case(cid, False) for cid in split.val_ids]
        net = build_network(arch, seed=cfg.seed * 1000 + split.fold_index)
        net, _ = train(net, train_cases, cfg, rng, val_cases=val_cases,
                       patch_size=patch_size, run_dir=fold_dir, select=select)

        for cid in split.val_ids:
            image, label = cases[cid]
            probs = sliding_window_predict(net, image.data, sw_cfg)
            mask = largest_component(np.argmax(probs, axis=0) == 1)
            storage.save_npz(oof_dir / f"{cid}.npz", mask=mask.astype(np.int16))
            gt = label.data >= 1
            rows.append((split.fold_index, CaseMetrics(
                case_id=cid,
                dsc_organ=dice(mask, gt),
                dsc_tumor=None,
                haus95_organ=haus95(mask, gt, image.geometry.spacing),
                haus95_tumor=None,
            )))

    rows.sort(key=lambda r: r[1].case_id)
    write_metrics_csv(out_dir / "metrics_stage1.csv", rows)
    return CrossvalResult(1, fold_dirs, [m for _, m in rows])


def run_crossval_stage2(manifest: DatasetManifest, cache_dir, out_dir,
                        arch: ArchSpec, cfg: TrainConfig,
                        stage1_dir, stage2_mode: str = "image+mask",
                        sw_cfg: SlidingWindowConfig | None = None) -> CrossvalResult:
    """Tumor-stage cross-validation through the constrained cascade.

    In "image+mask" mode the stage-1 out-of-fold organ masks are a second
    training input channel (every case has one, mirroring the full-dataset
    inference pass of stage 1). Held-out cases are evaluated end to end:
    stage-1 fold model -> organ mask -> stage-2 model -> containment ->
    final labels.
    """
    out_dir = Path(out_dir)
    stage1_dir = Path(stage1_dir)
    arch = _effective_arch(arch, cfg)
    if arch.out_classes != 3:
        raise ValueError(f"stage-2 arch must have 3 output classes, got {arch.out_classes}")
    expected_in = 2 if stage2_mode == "image+mask" else 1
    if arch.in_channels != expected_in:
        raise ValueError(
            f"stage-2 arch takes {arch.in_channels} channels but mode "
            f"{stage2_mode!r} provides {expected_in}"
        )
    patch_size = manifest.patch_size
    if patch_size is None:
        raise ValueError("manifest has no derived patch size; run preprocessing first")
    if sw_cfg is None:
        sw_cfg = SlidingWindowConfig(patch_size)

    ids = manifest.case_ids()
    if stage2_mode == "image+mask":
        missing = [cid for cid in ids
                   if not (stage1_dir / "stage1_oof" / f"{cid}.npz").exists()]
        if missing:
            raise FileNotFoundError(
                f"stage-1 out-of-fold masks missing for cases {missing}; "
                f"run stage-1 cross-validation first"
            )

    cases = _load_cases(cache_dir, ids)
    folds = make_folds(ids, cfg.folds, cfg.seed)

    def tumor_case(cid):
        image, label = cases[cid]
        if stage2_mode == "image+mask":
            oof = storage.load_npz(stage1_dir / "stage1_oof" / f"{cid}.npz")["mask"]
            data = stage2_input(image.data, oof, stage2_mode)
        else:
            data = image.data
        return TrainCase(cid, data, label.data)

    rows = []
    fold_dirs = []
    violations = 0
    for split in folds:
        fold_dir = out_dir / f"fold_{split.fold_index}"
        fold_dirs.append(fold_dir)
        rng = np.random.default_rng(cfg.seed * 2000 + split.fold_index)

        train_cases = [tumor_case(cid) for cid in split.train_ids]
        val_cases = [tumor_case(cid) for cid in split.val_ids]
        net = build_network(arch, seed=cfg.seed * 2000 + split.fold_index)
        net, _ = train(net, train_cases, cfg, rng, val_cases=val_cases,
                       patch_size=patch_size, run_dir=fold_dir)

        organ_ckpt = stage1_dir / f"fold_{split.fold_index}" / "best.ckpt.npz"
        if not organ_ckpt.exists():
            organ_ckpt = stage1_dir / f"fold_{split.fold_index}" / "final.ckpt.npz"
        organ_net, _ = load_checkpoint(organ_ckpt)

        for cid in split.val_ids:
            image, label = cases[cid]
            result = two_stage_segment(image, organ_net, net, sw_cfg,
                                       stage2_mode=stage2_mode)
            violations += result.containment_violations()
            rows.append((split.fold_index,
                         evaluate_case(result.final_labels, label, case_id=cid)))

    rows.sort(key=lambda r: r[1].case_id)
    write_metrics_csv(out_dir / "metrics_stage2.csv", rows)
    return CrossvalResult(2, fold_dirs, [m for _, m in rows],
                          containment_violations=violations)


def compare_presets(manifest: DatasetManifest, cache_dir, out_dir,
                    arch: ArchSpec, epochs: int, seed: int,
                    batch_size: int = 2, folds: int = 5,
                    patches_per_case: int = 1, select: str = "final",
                    train_label_jitter: bool = False) -> dict:
    """Run stage-1 cross-validation under both named presets on identical
    folds and seed; returns mean organ DSC per preset plus the delta.

    The comparison scores the fixed-horizon (final-checkpoint) models by
    default, mirroring a train-N-epochs-then-infer protocol with no early
    stopping. With ``train_label_jitter`` the training labels carry one
    voxel of simulated annotation variability while validation stays clean,
    which is the regime the regularization features target.
    """
    out_dir = Path(out_dir)
    jseed = seed + 977 if train_label_jitter else None
    results = {}
    for name in ("default", "customized"):
        cfg = TrainConfig.from_preset(name, epochs=epochs, seed=seed,
                                      batch_size=batch_size, folds=folds,
                                      patches_per_case=patches_per_case)
        res = run_crossval_stage1(manifest, cache_dir, out_dir / name, arch, cfg,
                                  select=select, train_label_jitter_seed=jseed)
        results[name] = res.mean_dsc("organ")
    results["delta"] = results["customized"] - results["default"]
    lines = ["preset\tmean_organ_dsc"]
    for name in ("default", "customized"):
        lines.append(f"{name}\t{results[name]:.10g}")
    lines.append(f"delta (customized - default)\t{results['delta']:.10g}")
    (out_dir / "preset_ablation.tsv").write_text("\n".join(lines) + "\n")
    return results
