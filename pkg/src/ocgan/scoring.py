"""Anomaly scores for trained models.

The raw score of an image ``x`` with reconstruction ``x'`` is

    lambda1 * mean|x - x'| + lambda2 * (1 - D(x')) + lambda3 * mean((z - z')**2)

where ``z`` and ``z'`` are the latent codes of ``x`` and ``x'``. Terms of
modules a variant does not have are zero. Scores are min-max normalised over
the scored cohort.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import torch

from .config import uses_disc, uses_enc2
from .data import ImageLoadError, ImageRecord, load_image
from .losses import LossWeights
from .networks import ModelParams, discriminator_forward, encoder_forward, unet_forward

if TYPE_CHECKING:
    from .trainer import TrainState

SCORE_HEADER = ("path", "label", "patient_id", "raw_score", "norm_score",
                "recon_term", "disc_term", "latent_term")


@dataclass
class ScoreRecord:
    record: ImageRecord
    raw_score: float
    norm_score: float
    recon_term: float
    disc_term: float
    latent_term: float
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ScoreTable:
    records: list[ScoreRecord]
    model_id: str = ""
    min_raw: float = math.nan
    max_raw: float = math.nan

    def valid(self) -> list[ScoreRecord]:
        return [r for r in self.records if r.ok]

    @property
    def raw_scores(self) -> np.ndarray:
        return np.array([r.raw_score for r in self.valid()])

    @property
    def norm_scores(self) -> np.ndarray:
        return np.array([r.norm_score for r in self.valid()])

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.record.label for r in self.valid()], dtype=int)

    def write_csv(self, path: str | Path) -> Path:
        """Write one row per input record; failed records have empty score fields."""
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SCORE_HEADER)
            for r in self.records:
                rec = r.record
                if r.ok:
                    values = [repr(v) for v in (r.raw_score, r.norm_score, r.recon_term,
                                                r.disc_term, r.latent_term)]
                else:
                    values = [""] * 5
                writer.writerow([rec.path, rec.label, rec.patient_id, *values])
        return path


def read_score_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``(raw_scores, labels)`` from a score CSV, skipping failed rows."""
    scores, labels = [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"label", "raw_score"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            if row["raw_score"] == "":
                continue
            scores.append(float(row["raw_score"]))
            labels.append(int(row["label"]))
    return np.array(scores), np.array(labels, dtype=int)


def normalize_scores(raws: Sequence[float]) -> list[float]:
    """Min-max normalise to ``[0, 1]``; a constant list maps to all zeros."""
    if len(raws) == 0:
        raise ValueError("cannot normalise an empty score list")
    arr = np.asarray(raws, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return [0.0] * arr.size
    return [float(v) for v in np.clip((arr - lo) / (hi - lo), 0.0, 1.0)]


@torch.no_grad()
def score_terms(
    params: ModelParams, x: torch.Tensor, variant: str = "U+D+E"
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-image ``(recon_term, disc_term, latent_term)`` for a batch ``(B, 1, H, W)``.

    Runs every network in inference mode without input noise.
    """
    dtype = next(params.parameters()).dtype
    x = x.to(dtype)
    x_recon, enc = unet_forward(params, x, train_mode=False)
    recon = (x - x_recon).abs().flatten(1).mean(dim=1)
    zeros = torch.zeros_like(recon)
    disc = 1.0 - discriminator_forward(params, x_recon) if uses_disc(variant) else zeros
    if uses_enc2(variant):
        enc2 = encoder_forward(params, x_recon)
        latent = (enc.latent - enc2.latent).pow(2).mean(dim=1)
    else:
        latent = zeros
    return recon, disc, latent


def combine_terms(recon: float, disc: float, latent: float, weights: LossWeights) -> float:
    return weights.lambda1 * recon + weights.lambda2 * disc + weights.lambda3 * latent


def anomaly_score(
    state: TrainState, x: torch.Tensor, weights: LossWeights | None = None
) -> dict[str, float]:
    """Score a single image of shape ``(1, H, W)`` or ``(1, 1, H, W)``.

    Returns the three terms and ``raw_score``. ``weights`` defaults to the
    model's training weights.
    """
    weights = weights or state.config.weights
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected a single image, got shape {tuple(x.shape)}")
    recon, disc, latent = (float(t[0]) for t in score_terms(state.params, x, state.config.variant))
    return {
        "recon_term": recon,
        "disc_term": disc,
        "latent_term": latent,
        "raw_score": combine_terms(recon, disc, latent, weights),
    }


def model_id(state: TrainState) -> str:
    return f"{state.config.variant}/seed{state.config.seed}/epoch{state.epoch}"


def score_dataset(
    state: TrainState,
    records: Sequence[ImageRecord],
    batch_size: int = 64,
    weights: LossWeights | None = None,
    cache: dict[str, torch.Tensor] | None = None,
) -> ScoreTable:
    """Score every record and normalise over the successfully scored ones.

    Unreadable images yield a ``ScoreRecord`` with ``error`` set; they are
    excluded from the normalisation bounds.
    """
    if not records:
        raise ValueError("no records to score")
    weights = weights or state.config.weights
    size = state.params.arch.image_size
    images: dict[int, torch.Tensor] = {}
    errors: dict[int, str] = {}
    for i, rec in enumerate(records):
        try:
            if cache is not None and rec.path in cache:
                images[i] = cache[rec.path]
            else:
                images[i] = load_image(rec.path, size)
                if cache is not None:
                    cache[rec.path] = images[i]
        except ImageLoadError as exc:
            errors[i] = str(exc)

    terms: dict[int, tuple[float, float, float]] = {}
    good = sorted(images)
    for start in range(0, len(good), batch_size):
        idx = good[start : start + batch_size]
        batch = torch.stack([images[i] for i in idx])
        recon, disc, latent = score_terms(state.params, batch, state.config.variant)
        for j, i in enumerate(idx):
            terms[i] = (float(recon[j]), float(disc[j]), float(latent[j]))

    raws = {i: combine_terms(*t, weights) for i, t in terms.items()}
    norms = dict(zip(good, normalize_scores([raws[i] for i in good]))) if good else {}
    out = []
    for i, rec in enumerate(records):
        if i in errors:
            out.append(ScoreRecord(rec, math.nan, math.nan, math.nan, math.nan, math.nan, errors[i]))
        else:
            out.append(ScoreRecord(rec, raws[i], norms[i], *terms[i]))
    raw_values = [raws[i] for i in good]
    return ScoreTable(
        records=out,
        model_id=model_id(state),
        min_raw=min(raw_values) if raw_values else math.nan,
        max_raw=max(raw_values) if raw_values else math.nan,
    )
