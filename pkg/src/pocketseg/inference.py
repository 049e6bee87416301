"""Whole-volume prediction and the organ -> tumor cascade.

Stage 1 predicts a binary organ mask (largest connected component kept);
stage 2 predicts 3-class labels, optionally seeing the stage-1 mask as a
second input channel, and the final tumor is hard-intersected with the
stage-1 mask so tumor voxels can never lie outside the organ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .network import PocketNet
from .volume import Geometry, LabelVolume, Volume, reorient, resample_to_reference


@dataclass(frozen=True)
class SlidingWindowConfig:
    patch_size: tuple
    overlap: float = 0.5
    blend: str = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if not 0 <= self.overlap < 1:
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.blend not in ("uniform", "gaussian"):
            raise ValueError(f"blend must be uniform or gaussian, got {self.blend!r}")


def _window_starts(dim: int, patch: int, overlap: float) -> list:
    if dim <= patch:
        return [0]
    stride = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def _blend_map(patch_size, blend: str) -> np.ndarray:
    if blend == "uniform":
        return np.ones(patch_size, dtype=np.float64)
    # per-axis gaussian, sigma = patch/8, centered on the window
    axes = []
    for p in patch_size:
        sigma = p / 8.0
        x = np.arange(p, dtype=np.float64) - (p - 1) / 2.0
        axes.append(np.exp(-0.5 * (x / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return np.maximum(w, 1e-8)


def sliding_window_predict(net: PocketNet, image, cfg: SlidingWindowConfig) -> np.ndarray:
    """Blend-weighted per-class probability volume (C, X, Y, Z).

    Windows tile the volume at the configured overlap; each window's logits
    pass through softmax before blending, so per-voxel probabilities sum
    to 1. Volumes smaller than the patch are zero-padded and cropped back.
    A volume that is exactly one window takes the direct forward path, so
    the result is bit-identical to a single forward pass.
    """
    if isinstance(image, Volume):
        image = image.data
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    dims = arr.shape[1:]
    patch = cfg.patch_size

    pad = [(0, max(0, p - d)) for p, d in zip(patch, dims)]
    padded = arr
    if any(hi for _, hi in pad):
        padded = np.pad(arr, [(0, 0)] + pad)
    pdims = padded.shape[1:]

    net.eval()
    with torch.no_grad():
        if tuple(pdims) == tuple(patch) and tuple(dims) == tuple(patch):
            x = torch.from_numpy(padded[None])
            logits, _ = net(x)
            return torch.softmax(logits, dim=1)[0].numpy()

        starts = [_window_starts(d, p, cfg.overlap) for d, p in zip(pdims, patch)]
        weight = _blend_map(patch, cfg.blend)
        n_classes = net.spec.out_classes
        acc = np.zeros((n_classes,) + tuple(pdims), dtype=np.float64)
        wsum = np.zeros(pdims, dtype=np.float64)
        slices = [
            (slice(sx, sx + patch[0]), slice(sy, sy + patch[1]),
             slice(sz, sz + patch[2]))
            for sx in starts[0] for sy in starts[1] for sz in starts[2]
        ]
        # windows are forwarded in batches; accumulation stays in window
        # index order so the reduction is deterministic
        batch = 8
        for i in range(0, len(slices), batch):
            chunk = slices[i:i + batch]
            x = torch.from_numpy(
                np.stack([padded[(slice(None),) + sl] for sl in chunk]))
            logits, _ = net(x)
            probs = torch.softmax(logits, dim=1).numpy().astype(np.float64)
            for p, sl in zip(probs, chunk):
                acc[(slice(None),) + sl] += p * weight
                wsum[sl] += weight
        probs = acc / wsum
        crop = tuple(slice(0, d) for d in dims)
        return probs[(slice(None),) + crop].astype(np.float32)


def largest_component(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Keep only the largest connected component of a binary mask.

    Ties are broken toward the component containing the smallest flat voxel
    index. Empty input stays empty; the operation is idempotent.
    """
    mask = np.asarray(mask).astype(bool)
    if connectivity == 26:
        structure = np.ones((3, 3, 3), dtype=bool)
    elif connectivity == 6:
        structure = ndimage.generate_binary_structure(3, 1)
    else:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    labeled, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return np.zeros_like(mask)
    sizes = np.bincount(labeled.ravel())[1:]
    best = np.flatnonzero(sizes == sizes.max()) + 1
    if len(best) > 1:
        flat = labeled.ravel()
        keep = min(best, key=lambda lbl: int(np.flatnonzero(flat == lbl)[0]))
    else:
        keep = int(best[0])
    return labeled == keep


@dataclass
class TwoStageResult:
    organ_mask: LabelVolume          # labels {0, 1} from stage 1
    final_labels: LabelVolume        # labels {0, 1, 2}, tumor inside organ_mask
    organ_probs: np.ndarray | None = None
    tumor_probs: np.ndarray | None = None

    def containment_violations(self) -> int:
        tumor = self.final_labels.data == 2
        return int(np.logical_and(tumor, self.organ_mask.data == 0).sum())


STAGE2_MODES = ("image", "image+mask")


def stage2_input(image: np.ndarray, organ_mask: np.ndarray, mode: str) -> np.ndarray:
    """Assemble the stage-2 network input for the configured channel mode."""
    if mode == "image":
        return np.asarray(image, dtype=np.float32)[None] \
            if np.asarray(image).ndim == 3 else np.asarray(image, dtype=np.float32)
    if mode == "image+mask":
        img = np.asarray(image, dtype=np.float32)
        if img.ndim == 4:
            img = img[0]
        return np.stack([img, np.asarray(organ_mask, dtype=np.float32)])
    raise ValueError(f"stage-2 input mode must be one of {STAGE2_MODES}, got {mode!r}")


def constrain_tumor(stage2_labels: np.ndarray, organ_mask: np.ndarray) -> np.ndarray:
    """Apply the containment rule to stage-2 labels.

    Tumor is intersected with the organ mask and reduced to its largest
    connected component. Voxels that lose their tumor label become organ if
    stage 1 or stage 2 marked them organ there, else background; stage-2
    organ labels pass through unchanged.
    """
    stage2_labels = np.asarray(stage2_labels)
    organ_mask = np.asarray(organ_mask).astype(bool)
    tumor_in = np.logical_and(stage2_labels == 2, organ_mask)
    tumor_final = largest_component(tumor_in)
    demoted = np.logical_and(stage2_labels == 2, ~tumor_final)

    final = np.zeros(stage2_labels.shape, dtype=np.int16)
    final[stage2_labels == 1] = 1
    final[np.logical_and(demoted, organ_mask)] = 1
    final[tumor_final] = 2
    return final


def two_stage_segment(image: Volume, organ_net: PocketNet, tumor_net: PocketNet,
                      cfg: SlidingWindowConfig, stage2_mode: str = "image+mask",
                      retain_probs: bool = False) -> TwoStageResult:
    """Organ mask first, then tumor constrained to lie inside it.

    Stage 1: organ probabilities -> argmax -> largest component -> organ
    mask. Stage 2: 3-class argmax labels from the image (plus the organ mask
    as a second channel in "image+mask" mode). Tumor voxels outside the
    organ mask are removed: they become organ where stage 1 or stage 2
    marked organ, else background. The final tumor is the largest connected
    component of the constrained tumor; voxels it drops are inside the organ
    mask and therefore become organ.
    """
    if stage2_mode not in STAGE2_MODES:
        raise ValueError(f"stage-2 input mode must be one of {STAGE2_MODES}, got {stage2_mode!r}")
    expected_channels = 2 if stage2_mode == "image+mask" else 1
    if tumor_net.spec.in_channels != expected_channels:
        raise ValueError(
            f"stage-2 network takes {tumor_net.spec.in_channels} channels but "
            f"mode {stage2_mode!r} provides {expected_channels}"
        )
    if organ_net.spec.out_classes != 2:
        raise ValueError(f"stage-1 network must have 2 classes, got {organ_net.spec.out_classes}")
    if tumor_net.spec.out_classes != 3:
        raise ValueError(f"stage-2 network must have 3 classes, got {tumor_net.spec.out_classes}")

    organ_probs = sliding_window_predict(organ_net, image.data, cfg)
    organ_arg = np.argmax(organ_probs, axis=0)
    organ_mask = largest_component(organ_arg == 1)

    x2 = stage2_input(image.data, organ_mask, stage2_mode)
    tumor_probs = sliding_window_predict(tumor_net, x2, cfg)
    stage2_labels = np.argmax(tumor_probs, axis=0)

    final = constrain_tumor(stage2_labels, organ_mask)
    geom = image.geometry
    return TwoStageResult(
        organ_mask=LabelVolume(organ_mask.astype(np.int16), geom, label_set=(0, 1)),
        final_labels=LabelVolume(final, geom),
        organ_probs=organ_probs if retain_probs else None,
        tumor_probs=tumor_probs if retain_probs else None,
    )


def restore_to_original(pred: LabelVolume, original_dims, original_geometry: Geometry) -> LabelVolume:
    """Map a prediction from preprocessed space back onto the input grid.

    Restores the input orientation, then nearest-neighbor resamples onto the
    original dims/spacing so the written file matches the source image
    voxel-for-voxel.
    """
    pred = reorient(pred, original_geometry.orientation)
    return resample_to_reference(pred, original_dims, original_geometry, mode="nearest")
