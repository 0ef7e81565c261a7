"""Dataset manifests, patient-aware splitting, image loading and batching.

Images are stored as PNG files and described by a CSV manifest with the
header ``path,label,patient_id,split``. Label ``0`` is normal, ``1`` is
abnormal. The training split is one-class: it may only hold normal images.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ("path", "label", "patient_id", "split")

# PNG modes PIL reports for 16-bit grayscale data.
_SIXTEEN_BIT_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N"}
_LUMA = np.array([0.299, 0.587, 0.114])


class ManifestError(ValueError):
    """Raised when a manifest violates the split invariants."""


class ImageLoadError(OSError):
    """Raised when an image file cannot be decoded."""


@dataclass(frozen=True)
class ImageRecord:
    path: str
    label: int
    patient_id: str

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if not self.path:
            raise ValueError("path must be non-empty")
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")


@dataclass
class SplitManifest:
    """Train/val/test partition of image records.

    ``dropped_abnormal`` counts abnormal records that were discarded because
    their patient landed in the training split.
    """

    train: list[ImageRecord] = field(default_factory=list)
    val: list[ImageRecord] = field(default_factory=list)
    test: list[ImageRecord] = field(default_factory=list)
    dropped_abnormal: int = 0

    def split(self, name: str) -> list[ImageRecord]:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)

    def patients(self, name: str) -> set[str]:
        return {r.patient_id for r in self.split(name)}

    def validate(self) -> None:
        """Check the one-class and patient-disjointness invariants."""
        abnormal = [r.path for r in self.train if r.label != 0]
        if abnormal:
            raise ManifestError(f"abnormal in train: {abnormal[0]} ({len(abnormal)} total)")
        seen: dict[str, str] = {}
        for name in SPLITS:
            for record in self.split(name):
                if record.path in seen:
                    raise ManifestError(
                        f"record {record.path} appears in both {seen[record.path]} and {name}"
                    )
                seen[record.path] = name
        for i, a in enumerate(SPLITS):
            for b in SPLITS[i + 1 :]:
                overlap = self.patients(a) & self.patients(b)
                if overlap:
                    raise ManifestError(
                        f"patient overlap between {a} and {b}: {sorted(overlap)[:5]}"
                    )

    def write_csv(self, path: str | Path, relative_to: str | Path | None = None) -> Path:
        """Write the manifest as CSV; paths are made relative to ``relative_to`` when possible."""
        path = Path(path)
        base = Path(relative_to) if relative_to is not None else None
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            for name in SPLITS:
                for r in self.split(name):
                    p = r.path
                    if base is not None:
                        try:
                            p = Path(p).relative_to(base).as_posix()
                        except ValueError:
                            pass
                    writer.writerow((p, r.label, r.patient_id, name))
        return path


def load_manifest(path: str | Path) -> SplitManifest:
    """Read a manifest CSV.

    Relative image paths are resolved against the manifest's directory.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        ManifestError: On a malformed row, an abnormal training record or a
            patient shared between splits.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    manifest = SplitManifest()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            p, label, patient, split = (v.strip() for v in row)
            if label not in ("0", "1"):
                raise ManifestError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            if not p or not patient:
                raise ManifestError(f"{path}:{lineno}: empty path or patient_id")
            if int(label) == 1 and split == "train":
                raise ManifestError(f"{path}:{lineno}: abnormal in train ({p})")
            resolved = Path(p) if Path(p).is_absolute() else root / p
            manifest.split(split).append(ImageRecord(str(resolved), int(label), patient))
    manifest.validate()
    return manifest


def _allocate(n: int, ratios: Sequence[float]) -> list[int]:
    # Largest-remainder apportionment; ties go to the earlier split.
    raw = [n * r for r in ratios]
    counts = [math.floor(v + 1e-9) for v in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_by_patient(
    records: Sequence[ImageRecord],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitManifest:
    """Partition records into train/val/test so that no patient spans two splits.

    Patients are shuffled with ``seed`` and apportioned by ``ratios``. Abnormal
    images of patients assigned to train are dropped, and the number dropped
    is stored in ``SplitManifest.dropped_abnormal``.
    """
    if not records:
        raise ValueError("cannot split an empty record list")
    if len(ratios) != 3 or any(r < 0 or not math.isfinite(r) for r in ratios):
        raise ValueError(f"ratios must be three non-negative fractions, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    if ratios[0] == 0:
        raise ValueError("train ratio must be positive")

    patients = sorted({r.patient_id for r in records})
    counts = _allocate(len(patients), ratios)
    for name, ratio, count in zip(SPLITS, ratios, counts):
        if ratio > 0 and count == 0:
            raise ValueError(
                f"{len(patients)} patients are too few for a non-empty {name} split at ratios {ratios}"
            )
    order = np.random.default_rng(seed).permutation(len(patients))
    assignment: dict[str, str] = {}
    start = 0
    for name, count in zip(SPLITS, counts):
        for idx in order[start : start + count]:
            assignment[patients[idx]] = name
        start += count

    manifest = SplitManifest()
    for record in records:
        name = assignment[record.patient_id]
        if name == "train" and record.label != 0:
            manifest.dropped_abnormal += 1
            continue
        manifest.split(name).append(record)
    if manifest.dropped_abnormal:
        logger.info("dropped %d abnormal records of train patients", manifest.dropped_abnormal)
    manifest.validate()
    return manifest


def load_image(path: str | Path, size: int = 64) -> torch.Tensor:
    """Load an image as a ``(1, size, size)`` float tensor in ``[-1, 1]``.

    RGB input is reduced to luma, resampled bilinearly, and ``[0, max]`` of
    the file's bit depth is mapped linearly onto ``[-1, 1]``.
    """
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode == "P":
                img = img.convert("RGBA" if "transparency" in img.info else "RGB")
                mode = img.mode
            elif mode == "1":
                img = img.convert("L")
                mode = "L"
            arr = np.asarray(img, dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageLoadError(f"cannot read image {path}: {exc}") from exc

    max_value = 65535.0 if mode in _SIXTEEN_BIT_MODES else 255.0
    if arr.ndim == 3:
        arr = arr[..., :3] @ _LUMA if arr.shape[-1] >= 3 else arr[..., 0]
    if arr.ndim != 2 or arr.size == 0:
        raise ImageLoadError(f"{path}: zero-area or unsupported image of shape {arr.shape}")

    if arr.shape != (size, size):
        resized = Image.fromarray(arr.astype(np.float32), mode="F").resize(
            (size, size), Image.Resampling.BILINEAR
        )
        arr = np.asarray(resized, dtype=np.float64)
    scaled = np.clip(2.0 * arr / max_value - 1.0, -1.0, 1.0)
    return torch.from_numpy(scaled.astype(np.float32)).unsqueeze(0)


@dataclass
class ImageBatch:
    data: torch.Tensor
    labels: torch.Tensor
    records: list[ImageRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.data.ndim != 4 or self.data.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) data, got {tuple(self.data.shape)}")
        if self.data.shape[0] < 1:
            raise ValueError("empty batch")
        if self.data.shape[2] != self.data.shape[3]:
            raise ValueError(f"images must be square, got {tuple(self.data.shape[2:])}")
        if self.labels.shape != (self.data.shape[0],):
            raise ValueError("labels must have one entry per image")
        if self.data.min() < -1 or self.data.max() > 1:
            raise ValueError("image intensities must lie in [-1, 1]")

    def __len__(self) -> int:
        return self.data.shape[0]


def batch_iter(
    records: Sequence[ImageRecord],
    batch_size: int,
    shuffle: bool = False,
    seed: int | Sequence[int] = 0,
    image_size: int = 64,
    cache: dict[str, torch.Tensor] | None = None,
) -> Iterator[ImageBatch]:
    """Yield ``ceil(N / batch_size)`` batches covering each record once.

    ``cache`` maps path to a loaded tensor and is filled lazily, so repeated
    epochs decode each file once.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not records:
        raise ValueError("cannot batch an empty record list")
    order = np.arange(len(records))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(records))

    def _get(record: ImageRecord) -> torch.Tensor:
        if cache is None:
            return load_image(record.path, image_size)
        img = cache.get(record.path)
        if img is None:
            img = cache[record.path] = load_image(record.path, image_size)
        return img

    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start : start + batch_size]]
        yield ImageBatch(
            data=torch.stack([_get(r) for r in chunk]),
            labels=torch.tensor([r.label for r in chunk], dtype=torch.long),
            records=chunk,
        )
