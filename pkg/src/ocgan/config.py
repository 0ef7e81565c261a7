"""Training configuration and ablation variants."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import torch

from .losses import LossWeights
from .networks import ArchitectureConfig

VARIANTS = ("U", "U+E", "U+D", "U+D+E")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


def uses_disc(variant: str) -> bool:
    return "D" in variant.split("+")


def uses_enc2(variant: str) -> bool:
    return "E" in variant.split("+")


@dataclass(frozen=True)
class TrainConfig:
    """Resolved settings of one training run.

    ``d_steps`` is the number of discriminator updates per generator update.
    ``keep_checkpoints`` bounds how many per-epoch checkpoints stay on disk
    (0 keeps all of them).
    """

    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 5e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs: int = 15
    batch_size: int = 64
    seed: int = 0
    variant: str = "U+D+E"
    d_steps: int = 1
    saturating_gen: bool = False
    separate_enc2_optimizer: bool = False
    lr_schedule: str = "constant"
    dtype: str = "float32"
    keep_checkpoints: int = 1

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.d_steps < 1:
            raise ValueError(f"d_steps must be >= 1, got {self.d_steps}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if self.lr_schedule != "constant":
            raise ValueError(f"unsupported lr_schedule {self.lr_schedule!r}")
        if self.keep_checkpoints < 0:
            raise ValueError("keep_checkpoints must be >= 0")
        self.weights.require_positive()

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def replace(self, **changes: Any) -> TrainConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        """Build a config from a (possibly partial) nested dict."""
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        arch = data.pop("arch", None) or {}
        weights = data.pop("weights", None) or {}
        if "image_size" in arch and "n_levels" not in arch:
            arch = dict(arch)
            size = arch.pop("image_size")
            arch_cfg = ArchitectureConfig.for_image_size(size, **arch)
        else:
            arch_cfg = ArchitectureConfig(**arch)
        return cls(arch=arch_cfg, weights=LossWeights(**weights), **data)

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load_json(cls, path: str | Path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))
