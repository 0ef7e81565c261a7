"""Ablation harness and qualitative reconstruction grids."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import TrainConfig
from .data import ImageRecord, SplitManifest, load_image
from .metrics import roc_auc, roc_points
from .networks import unet_forward
from .scoring import score_dataset
from .trainer import TrainState, train

logger = logging.getLogger(__name__)

__all__ = [
    "AblationResult",
    "export_reconstruction_grid",
    "roc_auc",
    "roc_points",
    "run_ablation",
    "write_ablation_reports",
]


@dataclass
class AblationResult:
    """AUCs of one ablation arm across seeds.

    ``std`` is the sample standard deviation (``ddof=1``), 0 for a single run.
    """

    variant: str
    seeds: list[int] = field(default_factory=list)
    auc_runs: list[float] = field(default_factory=list)
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.auc_runs)) if self.auc_runs else math.nan

    @property
    def std(self) -> float:
        if len(self.auc_runs) < 2:
            return 0.0 if self.auc_runs else math.nan
        return float(np.std(self.auc_runs, ddof=1))


def run_ablation(
    base_config: TrainConfig,
    manifest: SplitManifest,
    seeds: Sequence[int],
    variants: Sequence[str] = ("U", "U+E", "U+D", "U+D+E"),
    out_dir: str | Path | None = None,
) -> list[AblationResult]:
    """Train and evaluate every ``(variant, seed)`` pair on the test split.

    A failed arm is logged and recorded in ``AblationResult.failures``
    instead of aborting the study. With ``out_dir`` each arm gets its own
    run directory and the CSV reports are written there.
    """
    if not seeds:
        raise ValueError("at least one seed is required")
    if {r.label for r in manifest.test} != {0, 1}:
        raise ValueError("the test split must contain both normal and abnormal images")
    out = Path(out_dir) if out_dir is not None else None
    results = []
    for variant in variants:
        result = AblationResult(variant=variant)
        for seed in seeds:
            config = base_config.replace(variant=variant, seed=seed)
            run_dir = out / f"{variant}_seed{seed}" if out is not None else None
            try:
                state, _ = train(config, manifest, run_dir=run_dir)
                table = score_dataset(state, manifest.test, batch_size=config.batch_size)
                if run_dir is not None:
                    table.write_csv(run_dir / "scores.csv")
                auc = roc_auc(table.raw_scores, table.labels)
            except Exception as exc:
                logger.error("ablation arm %s seed %d failed: %s", variant, seed, exc)
                result.failures[seed] = f"{type(exc).__name__}: {exc}"
                continue
            logger.info("ablation %s seed %d: AUC=%.4f", variant, seed, auc)
            result.seeds.append(seed)
            result.auc_runs.append(auc)
        results.append(result)
    if out is not None:
        write_ablation_reports(results, out)
    return results


def format_ablation_table(results: Sequence[AblationResult]) -> str:
    lines = [f"{'variant':<8} {'AUC mean':>9} {'std':>7}  per-seed AUCs", "-" * 48]
    for r in results:
        runs = ", ".join(f"{a:.3f}" for a in r.auc_runs)
        failed = f"  ({len(r.failures)} failed)" if r.failures else ""
        lines.append(f"{r.variant:<8} {r.mean:>9.3f} {r.std:>7.3f}  {runs}{failed}")
    lines.append("(std: sample standard deviation over seeds)")
    return "\n".join(lines)


def write_ablation_reports(results: Sequence[AblationResult], out_dir: str | Path) -> None:
    """Write ``ablation.csv``, ``ablation_summary.csv`` and ``ablation.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "ablation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("variant", "seed", "auc"))
        for r in results:
            for seed, auc in zip(r.seeds, r.auc_runs):
                writer.writerow((r.variant, seed, repr(auc)))
    with (out / "ablation_summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("variant", "mean", "std"))
        for r in results:
            writer.writerow((r.variant, repr(r.mean), repr(r.std)))
    (out / "ablation.txt").write_text(format_ablation_table(results) + "\n")


def _to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = img.detach().to(torch.float64).squeeze(0).numpy()
    return np.round((np.clip(arr, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


@torch.no_grad()
def export_reconstruction_grid(
    state: TrainState,
    records: Sequence[ImageRecord],
    out_path: str | Path,
    columns: int = 4,
) -> Path:
    """Save a PNG grid of ``(input, reconstruction)`` pairs in row-major order.

    Each cell is two image-size tiles side by side, input on the left. Unused
    cells in the last row stay black.
    """
    if not records:
        raise ValueError("need at least one record")
    if columns < 1:
        raise ValueError("columns must be >= 1")
    size = state.params.arch.image_size
    dtype = next(state.params.parameters()).dtype
    x = torch.stack([load_image(r.path, size) for r in records]).to(dtype)
    x_recon, _ = unet_forward(state.params, x, train_mode=False)

    rows = math.ceil(len(records) / columns)
    grid = np.zeros((rows * size, columns * 2 * size), dtype=np.uint8)
    for i in range(len(records)):
        r, c = divmod(i, columns)
        top, left = r * size, c * 2 * size
        grid[top : top + size, left : left + size] = _to_uint8(x[i])
        grid[top : top + size, left + size : left + 2 * size] = _to_uint8(x_recon[i])
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid, mode="L").save(out_path)
    return out_path
