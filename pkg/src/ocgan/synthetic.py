"""Deterministic synthetic chest-radiograph-like dataset.

Normal images are a smooth low-frequency background with two dark,
mirror-placed elliptical fields plus pixel noise. Abnormal images start from
an ordinary normal image and add one corruption:

* ``blob``: a bright Gaussian spot inside one of the dark fields,
* ``occlusion``: a filled rectangle overlapping a dark field,
* ``texture-shift``: high-frequency noise injected inside one dark field.

Every image gets its own patient id, so the one-image-per-patient rule makes
any split patient-disjoint by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import SPLITS, ImageRecord, SplitManifest

logger = logging.getLogger(__name__)

ANOMALY_KINDS = ("blob", "occlusion", "texture-shift")


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 64
    n_train_normal: int = 500
    n_train_abnormal: int = 0
    n_val_normal: int = 0
    n_val_abnormal: int = 0
    n_test_normal: int = 100
    n_test_abnormal: int = 100
    anomaly_kind: str = "blob"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_size < 32 or self.image_size % 32:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        for name in ("n_train_normal", "n_train_abnormal", "n_val_normal",
                     "n_val_abnormal", "n_test_normal", "n_test_abnormal"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.anomaly_kind not in ANOMALY_KINDS:
            raise ValueError(f"anomaly_kind must be one of {ANOMALY_KINDS}, got {self.anomaly_kind!r}")

    def counts(self, split: str) -> tuple[int, int]:
        if split == "train":
            return self.n_train_normal, 0
        return getattr(self, f"n_{split}_normal"), getattr(self, f"n_{split}_abnormal")


@dataclass(frozen=True)
class _Anatomy:
    offset: float
    center_y: float
    axis_x: float
    axis_y: float


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy / (size - 1), xx / (size - 1)


def _field_mask(yy: np.ndarray, xx: np.ndarray, a: _Anatomy, side: int) -> np.ndarray:
    d = ((xx - (0.5 + side * a.offset)) / a.axis_x) ** 2 + ((yy - a.center_y) / a.axis_y) ** 2
    return 1.0 / (1.0 + np.exp(np.clip((d - 1.0) * 10.0, -50, 50)))


def render_normal(rng: np.random.Generator, size: int) -> tuple[np.ndarray, _Anatomy]:
    """Render one normal image with intensities in ``[0, 1]``."""
    yy, xx = _grid(size)
    img = np.full((size, size), rng.uniform(0.55, 0.65))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.5, size=2)
        img += rng.uniform(0.01, 0.04) * np.cos(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    # brighter mediastinum-like band between the fields
    img += 0.06 * np.exp(-((xx - 0.5) ** 2) / (2 * 0.06**2))
    anatomy = _Anatomy(
        offset=rng.uniform(0.18, 0.22),
        center_y=rng.uniform(0.46, 0.54),
        axis_x=rng.uniform(0.11, 0.14),
        axis_y=rng.uniform(0.27, 0.32),
    )
    depth = rng.uniform(0.3, 0.38)
    for side in (-1, 1):
        img -= depth * _field_mask(yy, xx, anatomy, side)
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0), anatomy


def _point_in_field(rng: np.random.Generator, a: _Anatomy, side: int) -> tuple[float, float]:
    r = 0.6 * np.sqrt(rng.uniform())
    t = rng.uniform(0, 2 * np.pi)
    return a.center_y + r * a.axis_y * np.sin(t), 0.5 + side * a.offset + r * a.axis_x * np.cos(t)


def apply_anomaly(
    img: np.ndarray, anatomy: _Anatomy, kind: str, rng: np.random.Generator
) -> np.ndarray:
    """Return a corrupted copy of a normal image."""
    size = img.shape[0]
    yy, xx = _grid(size)
    side = int(rng.choice([-1, 1]))
    cy, cx = _point_in_field(rng, anatomy, side)
    out = img.copy()
    if kind == "blob":
        # opacity-like: at least as bright as the field is dark, about field-sized
        sigma = rng.uniform(0.08, 0.12)
        amp = rng.uniform(0.5, 0.7)
        out += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    elif kind == "occlusion":
        h, w = rng.uniform(0.15, 0.3, size=2)
        inside = (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
        out[inside] = rng.uniform(0.85, 0.95)
    elif kind == "texture-shift":
        mask = _field_mask(yy, xx, anatomy, side)
        out += mask * rng.normal(0.0, 0.15, size=img.shape)
    else:
        raise ValueError(f"unknown anomaly kind {kind!r}")
    return np.clip(out, 0.0, 1.0)


def render_image(spec: SyntheticSpec, split: str, index: int, abnormal: bool) -> np.ndarray:
    """Render image ``index`` of ``split`` as ``uint8``.

    The abnormal image at an index is the normal image at the same index with
    the corruption applied.
    """
    split_code = SPLITS.index(split)
    base, anatomy = render_normal(np.random.default_rng([spec.seed, split_code, index]), spec.image_size)
    if abnormal:
        base = apply_anomaly(
            base, anatomy, spec.anomaly_kind, np.random.default_rng([spec.seed, split_code, index, 1])
        )
    return np.round(base * 255.0).astype(np.uint8)


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir: str | Path) -> SplitManifest:
    """Write ``images/*.png`` and ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    if spec.n_train_abnormal:
        logger.warning("ignoring n_train_abnormal=%d: the training split is normal-only",
                       spec.n_train_abnormal)

    manifest = SplitManifest()
    for split in SPLITS:
        n_normal, n_abnormal = spec.counts(split)
        # normals take indices [0, n_normal), abnormals the indices after them
        for index in range(n_normal + n_abnormal):
            label = int(index >= n_normal)
            name = f"{split}_{index:05d}_{'abn' if label else 'nrm'}.png"
            Image.fromarray(render_image(spec, split, index, bool(label)), mode="L").save(image_dir / name)
            manifest.split(split).append(
                ImageRecord(str(image_dir / name), label, f"syn-{spec.seed}-{split}-{index:05d}")
            )
    manifest.validate()
    manifest.write_csv(out_dir / "manifest.csv", relative_to=out_dir)
    return manifest
