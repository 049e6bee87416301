"""Training losses: soft Dice + categorical cross-entropy, geometric
deep-supervision weighting, and the explicit L2 kernel penalty."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

DICE_SMOOTH = 1e-5


def dice_ce_loss(logits: torch.Tensor, target: torch.Tensor,
                 smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """(1 - mean soft Dice over classes) + mean categorical cross-entropy.

    Soft Dice per class c is (2 * sum(p_c * g_c) + smooth) /
    (sum(p_c) + sum(g_c) + smooth) with p the softmax probabilities and g
    the one-hot target, summed over the whole batch. Differentiable in the
    logits everywhere.
    """
    if logits.ndim != 5:
        raise ValueError(f"logits must be 5D (N, C, X, Y, Z), got {tuple(logits.shape)}")
    if target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(f"target shape {tuple(target.shape)} does not match logits "
                         f"{tuple(logits.shape)}")
    n_classes = logits.shape[1]
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n_classes):
        raise ValueError(f"target labels must be in [0, {n_classes}), got range "
                         f"[{int(target.min())}, {int(target.max())}]")

    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target.long(), n_classes).movedim(-1, 1).to(probs.dtype)

    dims = (0, 2, 3, 4)
    intersection = (probs * onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + onehot.sum(dim=dims)
    dice_per_class = (2.0 * intersection + smooth) / (denom + smooth)
    dice_term = 1.0 - dice_per_class.mean()

    ce_term = F.cross_entropy(logits, target.long())
    return dice_term + ce_term


def downsample_labels(target: torch.Tensor, times: int) -> torch.Tensor:
    """Nearest-neighbor label downsampling by 2x, applied ``times`` times."""
    for _ in range(times):
        target = target[:, ::2, ::2, ::2]
    return target


def deep_supervision_weights(n_heads: int) -> list:
    """Geometric head weights 2^-d, normalized to sum to one (d=0 is main)."""
    raw = [0.5 ** d for d in range(n_heads)]
    total = sum(raw)
    return [w / total for w in raw]


def deep_supervision_loss(outputs, target: torch.Tensor,
                          weights=None, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Weighted dice+CE over the main output and auxiliary heads.

    ``outputs`` is (main, aux_list) as returned by the network forward, or a
    flat [main, aux1, ...] list. Each aux map must halve the previous
    spatial dims; targets are matched by nearest-neighbor downsampling.
    Weights default to the normalized geometric schedule and always sum
    to 1.
    """
    if isinstance(outputs, tuple) and len(outputs) == 2 and isinstance(outputs[1], (list, tuple)):
        heads = [outputs[0], *outputs[1]]
    else:
        heads = list(outputs)

    main_dims = heads[0].shape[2:]
    for d, out in enumerate(heads):
        expected = tuple(m // (1 << d) for m in main_dims)
        if tuple(out.shape[2:]) != expected:
            raise ValueError(
                f"auxiliary output {d} has spatial dims {tuple(out.shape[2:])}, "
                f"expected successive halving {expected}"
            )

    if weights is None:
        weights = deep_supervision_weights(len(heads))
    else:
        weights = list(weights)
        if len(weights) != len(heads):
            raise ValueError(f"got {len(weights)} weights for {len(heads)} outputs")
        total = sum(weights)
        if total <= 0:
            raise ValueError("deep-supervision weights must have a positive sum")
        weights = [w / total for w in weights]

    loss = heads[0].new_zeros(())
    for d, (w, out) in enumerate(zip(weights, heads)):
        if w == 0:
            continue
        loss = loss + w * dice_ce_loss(out, downsample_labels(target, d), smooth)
    return loss


def l2_penalty(net: nn.Module, coeff: float) -> torch.Tensor:
    """coeff * sum of squared conv-kernel weights.

    Normalization parameters and all biases are excluded.
    """
    if coeff < 0:
        raise ValueError(f"l2 coefficient must be >= 0, got {coeff}")
    device = next(net.parameters()).device
    total = torch.zeros((), dtype=torch.float64, device=device)
    if coeff == 0:
        return total
    for module in net.modules():
        if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
            total = total + (module.weight.to(torch.float64) ** 2).sum()
    return coeff * total
