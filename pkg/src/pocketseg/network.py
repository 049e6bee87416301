"""Constant-width ("pocket") 3D encoder-decoder segmentation network.

The encoder is `levels` residual conv stages separated by strided-conv
downsampling; the decoder mirrors it with transposed-conv upsampling and
long skip concatenations. In pocket mode every conv keeps the same channel
width at every resolution level; the doubling baseline widens by 2x per
level, which is what the parameter-count comparison quantifies.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import storage

WIDENINGS = ("pocket", "doubling")


@dataclass(frozen=True)
class ArchSpec:
    levels: int = 4
    width: int = 32
    kernel: int = 3
    in_channels: int = 1
    out_classes: int = 2
    residual: bool = True
    deep_supervision_heads: int = 0
    widening: str = "pocket"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.in_channels < 1 or self.out_classes < 1:
            raise ValueError("in_channels and out_classes must be >= 1")
        if not 0 <= self.deep_supervision_heads < self.levels:
            raise ValueError(
                f"deep_supervision_heads must be in [0, levels), got "
                f"{self.deep_supervision_heads} with levels={self.levels}"
            )
        if self.widening not in WIDENINGS:
            raise ValueError(f"widening must be one of {WIDENINGS}, got {self.widening!r}")

    def channels(self, level: int) -> int:
        return self.width if self.widening == "pocket" else self.width * (1 << level)

    @property
    def downsample_factor(self) -> int:
        return 1 << (self.levels - 1)


class _ConvNormAct(nn.Module):
    """conv -> batch norm -> ReLU; stride 2 variant does the downsampling."""

    def __init__(self, c_in, c_out, kernel, stride=1):
        super().__init__()
        self.conv = nn.Conv3d(c_in, c_out, kernel, stride=stride,
                              padding=kernel // 2, bias=True)
        self.norm = nn.BatchNorm3d(c_out)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class _UpNormAct(nn.Module):
    """2x transposed-conv upsampling -> batch norm -> ReLU."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.ConvTranspose3d(c_in, c_out, kernel_size=2, stride=2, bias=True)
        self.norm = nn.BatchNorm3d(c_out)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    """Two conv-norm-ReLU units with an identity shortcut; a 1x1x1 projection
    is inserted only when the channel counts differ (stage entry)."""

    def __init__(self, c_in, c_out, kernel, residual=True):
        super().__init__()
        self.unit1 = _ConvNormAct(c_in, c_out, kernel)
        self.unit2 = _ConvNormAct(c_out, c_out, kernel)
        self.residual = residual
        self.project = None
        if residual and c_in != c_out:
            self.project = nn.Conv3d(c_in, c_out, kernel_size=1, bias=True)

    def forward(self, x):
        y = self.unit2(self.unit1(x))
        if not self.residual:
            return y
        return y + (x if self.project is None else self.project(x))


class PocketNet(nn.Module):
    """Encoder-decoder built from an ArchSpec; forward returns the full-
    resolution logits plus one auxiliary logit map per deep-supervision head
    (at successively halved resolutions)."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        k = spec.kernel
        L = spec.levels

        self.encoder = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.encoder.append(ResidualBlock(spec.in_channels, spec.channels(0), k,
                                          spec.residual))
        for lv in range(1, L):
            self.downs.append(_ConvNormAct(spec.channels(lv - 1), spec.channels(lv),
                                           k, stride=2))
            self.encoder.append(ResidualBlock(spec.channels(lv), spec.channels(lv), k,
                                              spec.residual))

        self.ups = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for lv in range(L - 2, -1, -1):
            self.ups.append(_UpNormAct(spec.channels(lv + 1), spec.channels(lv)))
            self.decoder.append(ResidualBlock(2 * spec.channels(lv), spec.channels(lv),
                                              k, spec.residual))

        self.head = nn.Conv3d(spec.channels(0), spec.out_classes, kernel_size=1,
                              bias=True)
        self.aux_heads = nn.ModuleList(
            nn.Conv3d(spec.channels(d), spec.out_classes, kernel_size=1, bias=True)
            for d in range(1, spec.deep_supervision_heads + 1)
        )

    def _check_input(self, x):
        spec = self.spec
        if x.ndim != 5:
            raise ValueError(f"expected a 5D batch (N, C, X, Y, Z), got shape "
                             f"{tuple(x.shape)}")
        if x.shape[1] != spec.in_channels:
            raise ValueError(f"expected {spec.in_channels} input channels, "
                             f"got {x.shape[1]}")
        factor = spec.downsample_factor
        for axis, name in zip(range(2, 5), "XYZ"):
            if x.shape[axis] % factor != 0:
                raise ValueError(
                    f"spatial axis {name} has size {x.shape[axis]}, not divisible "
                    f"by 2^(levels-1) = {factor}"
                )

    def forward(self, x):
        self._check_input(x)
        L = self.spec.levels

        skips = []
        for lv in range(L):
            x = self.encoder[lv](x)
            skips.append(x)
            if lv < L - 1:
                x = self.downs[lv](x)

        # feature map at each resolution level, filled in decoder order
        features = {L - 1: x}
        for i, lv in enumerate(range(L - 2, -1, -1)):
            x = self.ups[i](x)
            x = torch.cat([skips[lv], x], dim=1)
            x = self.decoder[i](x)
            features[lv] = x

        main = self.head(x)
        aux = [self.aux_heads[d - 1](features[d])
               for d in range(1, self.spec.deep_supervision_heads + 1)]
        return main, aux


def initialize_weights(net: nn.Module, seed: int) -> nn.Module:
    """Fan-in-scaled uniform init for conv kernels, zero biases, identity
    batch norm; fully determined by the seed."""
    gen = torch.Generator().manual_seed(seed)
    for module in net.modules():
        if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
            w = module.weight
            fan_in = w.shape[1] * int(np.prod(w.shape[2:]))
            bound = float(np.sqrt(6.0 / fan_in))
            with torch.no_grad():
                w.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.BatchNorm3d):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
    return net


def build_network(spec: ArchSpec, seed: int = 0) -> PocketNet:
    """Construct and deterministically initialize a network from its spec."""
    net = PocketNet(spec)
    initialize_weights(net, seed)
    return net


def _conv_params(k: int, c_in: int, c_out: int, bias: bool = True) -> int:
    """Trainable parameters of one conv: k^3 * c_in * c_out (+ c_out bias)."""
    return k ** 3 * c_in * c_out + (c_out if bias else 0)


def _norm_params(c: int) -> int:
    return 2 * c


def _block_params(c_in: int, c_out: int, k: int, residual: bool) -> int:
    total = _conv_params(k, c_in, c_out) + _norm_params(c_out)
    total += _conv_params(k, c_out, c_out) + _norm_params(c_out)
    if residual and c_in != c_out:
        total += _conv_params(1, c_in, c_out)
    return total


def count_parameters(spec: ArchSpec) -> int:
    """Exact trainable-parameter total of the network a spec describes.

    Computed analytically from the layer plan; equals the built network's
    summed element counts.
    """
    k = spec.kernel
    L = spec.levels
    c = spec.channels

    total = _block_params(spec.in_channels, c(0), k, spec.residual)
    for lv in range(1, L):
        total += _conv_params(k, c(lv - 1), c(lv)) + _norm_params(c(lv))  # down
        total += _block_params(c(lv), c(lv), k, spec.residual)
    for lv in range(L - 2, -1, -1):
        total += _conv_params(2, c(lv + 1), c(lv)) + _norm_params(c(lv))  # up
        total += _block_params(2 * c(lv), c(lv), k, spec.residual)
    total += _conv_params(1, c(0), spec.out_classes)  # main head
    for d in range(1, spec.deep_supervision_heads + 1):
        total += _conv_params(1, c(d), spec.out_classes)
    return total


def save_checkpoint(net: PocketNet, path, extra: dict | None = None) -> None:
    """Self-describing checkpoint: arch spec JSON + every named weight tensor.

    Stored as a deterministic npz so identical networks produce identical
    bytes.
    """
    arrays = {"__arch__": np.array(json.dumps(asdict(net.spec), sort_keys=True))}
    if extra:
        arrays["__extra__"] = np.array(json.dumps(extra, sort_keys=True))
    for name, tensor in net.state_dict().items():
        arrays["t::" + name] = tensor.detach().cpu().numpy()
    storage.save_npz(path, **arrays)


def load_checkpoint(path):
    """Rebuild a network from a checkpoint, validating every tensor shape.

    Returns (net, extra_dict). Raises ValueError naming the offending tensor
    on any shape or key mismatch.
    """
    arrays = storage.load_npz(path)
    if "__arch__" not in arrays:
        raise ValueError(f"{path}: missing arch spec entry")
    spec = ArchSpec(**json.loads(str(arrays["__arch__"])))
    extra = json.loads(str(arrays["__extra__"])) if "__extra__" in arrays else {}

    net = PocketNet(spec)
    state = net.state_dict()
    loaded = {}
    for name, target in state.items():
        key = "t::" + name
        if key not in arrays:
            raise ValueError(f"{path}: checkpoint is missing tensor {name!r}")
        value = arrays[key]
        if tuple(value.shape) != tuple(target.shape):
            raise ValueError(
                f"{path}: tensor {name!r} has shape {tuple(value.shape)}, "
                f"expected {tuple(target.shape)}"
            )
        loaded[name] = torch.as_tensor(value)
    stray = [k[3:] for k in arrays if k.startswith("t::") and k[3:] not in state]
    if stray:
        raise ValueError(f"{path}: unexpected tensors {stray}")
    net.load_state_dict(loaded)
    return net, extra
