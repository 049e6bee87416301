"""Training configuration, cosine schedule, fold splitting, and the
patch-sampled ADAM loop with per-epoch validation and checkpoints."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .inference import SlidingWindowConfig, sliding_window_predict
from .losses import deep_supervision_loss, l2_penalty
from .metrics import dice
from .network import PocketNet, save_checkpoint
from .preprocess import sample_patch

PRESETS = ("default", "customized")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    lr0: float = 1e-4
    lr_schedule: str = "cosine"
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_coeff: float = 1e-5
    ds_weighting: str = "geometric"
    batch_size: int = 2
    mixed_precision: bool = False
    seed: int = 0
    folds: int = 5
    preset: str | None = None
    deep_supervision: bool = True
    foreground_bias: float = 0.5
    patches_per_case: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patches_per_case < 1:
            raise ValueError(f"patches_per_case must be >= 1, got {self.patches_per_case}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"lr_schedule must be cosine or constant, got {self.lr_schedule!r}")
        if self.l2_coeff < 0:
            raise ValueError(f"l2_coeff must be >= 0, got {self.l2_coeff}")
        if not 0 <= self.foreground_bias <= 1:
            raise ValueError(f"foreground_bias must be in [0, 1], got {self.foreground_bias}")
        if self.ds_weighting != "geometric":
            raise ValueError(f"unknown deep-supervision weighting {self.ds_weighting!r}")
        if self.preset is not None:
            if self.preset not in PRESETS:
                raise ValueError(f"preset must be one of {PRESETS}, got {self.preset!r}")
            if self.preset == "default":
                ok = (self.lr0 == 3e-4 and self.lr_schedule == "constant"
                      and self.l2_coeff == 0.0 and not self.deep_supervision)
            else:
                ok = (self.lr0 == 1e-4 and self.lr_schedule == "cosine"
                      and self.l2_coeff > 0.0 and self.deep_supervision)
            if not ok:
                raise ValueError(
                    f"config fields do not match preset {self.preset!r}: "
                    f"lr0={self.lr0}, lr_schedule={self.lr_schedule}, "
                    f"l2_coeff={self.l2_coeff}, deep_supervision={self.deep_supervision}"
                )

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "TrainConfig":
        """The two named settings bundles: ``default`` (lr 3e-4, constant,
        no regularization) and ``customized`` (lr 1e-4, cosine schedule,
        deep supervision + L2)."""
        if name == "default":
            base = dict(preset="default", lr0=3e-4, lr_schedule="constant",
                        l2_coeff=0.0, deep_supervision=False)
        elif name == "customized":
            base = dict(preset="customized", lr0=1e-4, lr_schedule="cosine",
                        l2_coeff=1e-5, deep_supervision=True)
        else:
            raise ValueError(f"preset must be one of {PRESETS}, got {name!r}")
        base.update(overrides)
        return cls(**base)


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total_steps)) / 2."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} out of range [0, {total_steps}]")
    return lr_min + (lr0 - lr_min) * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class FoldSplit:
    fold_index: int
    train_ids: list
    val_ids: list


def make_folds(case_ids, k: int, seed: int) -> list:
    """Seeded shuffle + round-robin assignment into k validation folds.

    Validation sets partition the ids and differ in size by at most one.
    """
    ids = sorted(case_ids)
    if k < 1:
        raise ValueError(f"fold count must be >= 1, got {k}")
    if k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} cases")
    rng = np.random.default_rng(seed)
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    folds = []
    for i in range(k):
        val = sorted(shuffled[i::k])
        train = sorted(set(ids) - set(val))
        folds.append(FoldSplit(i, train, val))
    return folds


@dataclass
class TrainCase:
    """One preprocessed case held in memory for training."""

    case_id: str
    image: np.ndarray  # (C, X, Y, Z) float32
    label: np.ndarray  # (X, Y, Z) int16

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim == 3:
            self.image = self.image[None]
        self.label = np.asarray(self.label)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    val_dsc: dict


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int | None = None
    best_checkpoint: str | None = None
    final_checkpoint: str | None = None

    def save_table(self, path) -> None:
        keys = list(self.records[0].val_dsc) if self.records else []
        lines = ["\t".join(["epoch", "lr", "loss"] + [f"val_dsc_{k}" for k in keys])]
        for rec in self.records:
            cols = [str(rec.epoch), f"{rec.lr:.17g}", f"{rec.loss:.17g}"]
            cols += [f"{rec.val_dsc[k]:.17g}" for k in keys]
            lines.append("\t".join(cols))
        Path(path).write_text("\n".join(lines) + "\n")


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr0
    return cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min)


def _validate(net: PocketNet, val_cases, sw_cfg: SlidingWindowConfig) -> dict:
    out_classes = net.spec.out_classes
    organ, tumor = [], []
    for case in val_cases:
        probs = sliding_window_predict(net, case.image, sw_cfg)
        pred = np.argmax(probs, axis=0)
        organ.append(dice(pred >= 1, case.label >= 1))
        if out_classes >= 3:
            tumor.append(dice(pred == 2, case.label == 2))
    scores = {}
    if organ:
        scores["organ"] = float(np.mean(organ))
    if tumor:
        scores["tumor"] = float(np.mean(tumor))
    return scores


def train(net: PocketNet, train_cases, cfg: TrainConfig, rng=None,
          val_cases=(), patch_size=None, run_dir=None,
          val_overlap: float = 0.0, select: str = "best"):
    """Run the full training loop and return (net, TrainHistory).

    Each epoch draws ``patches_per_case`` foreground-biased patches from
    every training case in a seeded random order and steps ADAM on the
    deep-supervision dice+CE loss plus the L2 kernel penalty. The learning
    rate follows the configured schedule with one step per epoch. Non-finite
    losses halt training naming the offending batch. With lr0 = 0 the
    weights are untouched.

    Best-validation and final checkpoints are written when ``run_dir`` is
    given. ``select`` chooses which weights the returned network carries:
    "best" (best validation score; final when no validation set) or "final"
    (the fixed-horizon end state).
    """
    if select not in ("best", "final"):
        raise ValueError(f"select must be 'best' or 'final', got {select!r}")
    if patch_size is None:
        raise ValueError("patch_size is required")
    patch_size = tuple(int(p) for p in patch_size)
    factor = net.spec.downsample_factor
    for p, name in zip(patch_size, "XYZ"):
        if p % factor != 0:
            raise ValueError(f"patch axis {name}={p} not divisible by 2^(levels-1)={factor}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr0,
                                 betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    val_cfg = SlidingWindowConfig(patch_size, overlap=val_overlap, blend="uniform")

    history = TrainHistory()
    best_score = -1.0
    best_state = None

    for epoch in range(cfg.epochs):
        lr = _epoch_lr(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        draws = np.repeat(np.arange(len(train_cases)), cfg.patches_per_case)
        order = draws[rng.permutation(len(draws))]
        net.train()
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            patches = [
                sample_patch(train_cases[i].image, train_cases[i].label, patch_size,
                             rng, cfg.foreground_bias, train_cases[i].case_id)
                for i in batch_idx
            ]
            images = torch.from_numpy(np.stack([p.image for p in patches]))
            targets = torch.from_numpy(np.stack([p.label for p in patches])).long()

            optimizer.zero_grad(set_to_none=True)
            with torch.autocast("cpu", dtype=torch.bfloat16, enabled=cfg.mixed_precision):
                outputs = net(images)
                loss = deep_supervision_loss(outputs, targets)
            loss = loss.float() + l2_penalty(net, cfg.l2_coeff).float()
            if not torch.isfinite(loss):
                cases = [train_cases[i].case_id for i in batch_idx]
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch of cases {cases}"
                )
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        val_dsc = _validate(net, val_cases, val_cfg) if val_cases else {}
        history.records.append(EpochRecord(epoch, lr, float(np.mean(losses)), val_dsc))

        if val_dsc:
            score = float(np.mean(list(val_dsc.values())))
            if score > best_score:
                best_score = score
                history.best_epoch = epoch
                best_state = copy.deepcopy(net.state_dict())

    if run_dir is not None:
        final_path = run_dir / "final.ckpt.npz"
        save_checkpoint(net, final_path, extra={"epoch": cfg.epochs - 1})
        history.final_checkpoint = str(final_path)
        if best_state is not None:
            current = copy.deepcopy(net.state_dict())
            net.load_state_dict(best_state)
            best_path = run_dir / "best.ckpt.npz"
            save_checkpoint(net, best_path, extra={"epoch": history.best_epoch})
            history.best_checkpoint = str(best_path)
            net.load_state_dict(current)
        history.save_table(run_dir / "history.tsv")

    if select == "best" and best_state is not None:
        net.load_state_dict(best_state)
    return net, history
