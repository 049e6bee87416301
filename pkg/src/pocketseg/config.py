"""Run configuration: one YAML file composing the preprocessing, per-stage
architecture, training, and inference settings, with the two named training
presets selectable by flag."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .inference import STAGE2_MODES
from .network import ArchSpec
from .preprocess import PreprocessConfig
from .training import TrainConfig

_PRESET_FIELDS = ("preset", "lr0", "lr_schedule", "l2_coeff", "deep_supervision")


@dataclass
class RunConfig:
    preprocess: PreprocessConfig
    arch_stage1: ArchSpec
    arch_stage2: ArchSpec
    train: TrainConfig
    overlap: float = 0.5
    blend: str = "gaussian"
    stage2_mode: str = "image+mask"
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch_stage1.out_classes != 2:
            raise ValueError("stage-1 architecture must have out_classes = 2")
        if self.arch_stage2.out_classes != 3:
            raise ValueError("stage-2 architecture must have out_classes = 3")
        if self.stage2_mode not in STAGE2_MODES:
            raise ValueError(f"stage2_mode must be one of {STAGE2_MODES}")
        expected = 2 if self.stage2_mode == "image+mask" else 1
        if self.arch_stage2.in_channels != expected:
            raise ValueError(
                f"stage-2 architecture takes {self.arch_stage2.in_channels} input "
                f"channels but stage2_mode {self.stage2_mode!r} provides {expected}"
            )

    def path(self, key: str) -> Path:
        if key not in self.paths:
            raise KeyError(f"config paths section has no entry {key!r}")
        return Path(self.paths[key])


def _tupled(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_run_config(path, preset: str | None = None, seed: int | None = None,
                    check_paths: bool = False) -> RunConfig:
    """Parse a YAML run config; ``preset``/``seed`` override the file.

    With check_paths=True every referenced path must already exist.
    """
    raw = yaml.safe_load(Path(path).read_text()) or {}

    train_kwargs = _tupled(raw.get("train", {}))
    if seed is not None:
        train_kwargs["seed"] = seed
    if preset is not None:
        for k in _PRESET_FIELDS:
            train_kwargs.pop(k, None)
        train = TrainConfig.from_preset(preset, **train_kwargs)
    elif "preset" in train_kwargs:
        name = train_kwargs.pop("preset")
        for k in _PRESET_FIELDS:
            train_kwargs.pop(k, None)
        train = TrainConfig.from_preset(name, **train_kwargs)
    else:
        train = TrainConfig(**train_kwargs)

    inference = raw.get("inference", {})
    cfg = RunConfig(
        preprocess=PreprocessConfig(**_tupled(raw.get("preprocess", {}))),
        arch_stage1=ArchSpec(**_tupled(raw.get("arch_stage1", {}))),
        arch_stage2=ArchSpec(**_tupled(raw.get("arch_stage2", {}))),
        train=train,
        overlap=float(inference.get("overlap", 0.5)),
        blend=inference.get("blend", "gaussian"),
        stage2_mode=raw.get("stage2_mode", "image+mask"),
        paths={k: str(v) for k, v in raw.get("paths", {}).items()},
    )
    if check_paths:
        missing = [f"{k}: {v}" for k, v in cfg.paths.items() if not Path(v).exists()]
        if missing:
            raise FileNotFoundError("config paths do not exist:\n  " + "\n  ".join(missing))
    return cfg
