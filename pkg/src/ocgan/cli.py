"""Command-line interface.

Verbs: ``synth``, ``train``, ``score``, ``eval``, ``ablate`` and ``grid``.
Exit status is 0 on success, 1 on a domain error (bad data, failed training,
single-class evaluation) and 2 on a usage error. Training settings resolve as
defaults < ``--config`` JSON < explicit flags. ``OCGAN_RUN_DIR`` supplies the
default ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .config import VARIANTS, TrainConfig
from .data import SplitManifest, load_manifest
from .evaluation import export_reconstruction_grid, format_ablation_table, run_ablation
from .metrics import roc_auc, roc_points
from .scoring import ScoreTable, read_score_csv, score_dataset
from .synthetic import ANOMALY_KINDS, SyntheticSpec, generate_synthetic_dataset
from .trainer import TrainState, latest_checkpoint, load_checkpoint, train

logger = logging.getLogger("ocgan")

ENV_RUN_DIR = "OCGAN_RUN_DIR"
VERBS = ("synth", "train", "score", "eval", "ablate", "grid")

# flag dest -> (section of the config dict or None, key)
_CONFIG_FLAGS: dict[str, tuple[str | None, str]] = {
    "image_size": ("arch", "image_size"),
    "latent_dim": ("arch", "latent_dim"),
    "base_channels": ("arch", "base_channels"),
    "noise_std": ("arch", "noise_std"),
    "init_std": ("arch", "init_std"),
    "lambda1": ("weights", "lambda1"),
    "lambda2": ("weights", "lambda2"),
    "lambda3": ("weights", "lambda3"),
    "lambda4": ("weights", "lambda4"),
    "lr": (None, "lr"),
    "adam_beta1": (None, "adam_beta1"),
    "adam_beta2": (None, "adam_beta2"),
    "epochs": (None, "epochs"),
    "batch_size": (None, "batch_size"),
    "seed": (None, "seed"),
    "variant": (None, "variant"),
    "d_steps": (None, "d_steps"),
    "saturating_gen": (None, "saturating_gen"),
    "separate_enc2_optimizer": (None, "separate_enc2_optimizer"),
    "dtype": (None, "dtype"),
    "keep_checkpoints": (None, "keep_checkpoints"),
}


class UsageError(Exception):
    """Raised for argument combinations argparse cannot express."""


@dataclass
class Command:
    verb: str
    options: argparse.Namespace
    config: TrainConfig | None = None
    paths: dict[str, Path] = field(default_factory=dict)


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _variant_list(text: str) -> list[str]:
    values = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in values if v not in VARIANTS]
    if bad or not values:
        raise argparse.ArgumentTypeError(f"variants must be among {', '.join(VARIANTS)}; got {text!r}")
    return values


def _add_out(p: argparse.ArgumentParser, help_text: str) -> None:
    p.add_argument("--out", type=Path, default=None, help=f"{help_text} (default: ${ENV_RUN_DIR})")


def _add_data(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", type=Path, required=required,
                   help="dataset directory holding manifest.csv, or a manifest CSV")


def _add_model(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--checkpoint", type=Path, help="checkpoint file")
    g.add_argument("--run", type=Path, help="run directory; its latest checkpoint is used")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training configuration (flags override --config)")
    g.add_argument("--config", type=Path, help="JSON config file")
    g.add_argument("--image-size", type=_positive_int)
    g.add_argument("--latent-dim", type=_positive_int)
    g.add_argument("--base-channels", type=_positive_int)
    g.add_argument("--noise-std", type=_nonneg_float)
    g.add_argument("--init-std", type=_nonneg_float)
    for i in range(1, 5):
        g.add_argument(f"--lambda{i}", type=_positive_float, help="loss weight, must be > 0")
    g.add_argument("--lr", type=_nonneg_float)
    g.add_argument("--adam-beta1", type=_nonneg_float)
    g.add_argument("--adam-beta2", type=_nonneg_float)
    g.add_argument("--epochs", type=_positive_int)
    g.add_argument("--batch-size", type=_positive_int)
    g.add_argument("--seed", type=int)
    g.add_argument("--variant", choices=VARIANTS)
    g.add_argument("--d-steps", type=_positive_int)
    g.add_argument("--saturating-gen", action="store_true", default=None)
    g.add_argument("--separate-enc2-optimizer", action="store_true", default=None)
    g.add_argument("--dtype", choices=("float32", "float64"))
    g.add_argument("--keep-checkpoints", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ocgan", description="One-class adversarial anomaly detection: synthesize, train, score, evaluate."
    )
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="verb", metavar="{" + ",".join(VERBS) + "}")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_out(p, "dataset directory")
    p.add_argument("--n-train", type=int, default=500, help="normal training images")
    p.add_argument("--n-normal", type=int, default=100, help="normal test images")
    p.add_argument("--n-abnormal", type=int, default=100, help="abnormal test images")
    p.add_argument("--n-val-normal", type=int, default=0)
    p.add_argument("--n-val-abnormal", type=int, default=0)
    p.add_argument("--image-size", type=_positive_int, default=64)
    p.add_argument("--anomaly", choices=ANOMALY_KINDS, default="blob")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model")
    _add_data(p)
    _add_out(p, "run directory")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    _add_train_flags(p)

    p = sub.add_parser("score", help="write anomaly scores for a split")
    _add_model(p)
    _add_data(p)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    _add_out(p, "output directory for scores.csv")

    p = sub.add_parser("eval", help="compute the ROC-AUC of a model or score table")
    _add_model(p)
    p.add_argument("--scores", type=Path, help="existing score CSV (skips scoring)")
    _add_data(p, required=False)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    _add_out(p, "output directory for scores.csv and roc.csv")

    p = sub.add_parser("ablate", help="train and evaluate ablation arms over seeds")
    _add_data(p)
    _add_out(p, "study directory")
    p.add_argument("--variants", type=_variant_list, default=list(VARIANTS))
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3])
    _add_train_flags(p)

    p = sub.add_parser("grid", help="export an input/reconstruction grid")
    _add_model(p)
    _add_data(p)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--count", type=_positive_int, default=8, help="number of images")
    p.add_argument("--columns", type=_positive_int, default=4)
    p.add_argument("--out", type=Path, default=None, help="PNG path (default: $OCGAN_RUN_DIR/grid.png)")
    return parser


def resolve_config(options: argparse.Namespace) -> TrainConfig:
    """Merge defaults, the ``--config`` file and explicit flags."""
    data: dict[str, Any] = {}
    if options.config is not None:
        data = json.loads(Path(options.config).read_text())
        if not isinstance(data, dict):
            raise ValueError(f"{options.config}: expected a JSON object")
    data = {k: dict(v) if isinstance(v, dict) else v for k, v in data.items()}
    for dest, (section, key) in _CONFIG_FLAGS.items():
        value = getattr(options, dest, None)
        if value is None:
            continue
        target = data.setdefault(section, {}) if section else data
        target[key] = value
    arch = data.get("arch", {})
    if "image_size" in arch and options.image_size is not None:
        # n_levels follows the image size unless the file pins both
        arch.pop("n_levels", None)
    return TrainConfig.from_dict(data)


def _default_out(options: argparse.Namespace, fallback: Path | None = None) -> Path:
    if options.out is not None:
        return options.out
    env = os.environ.get(ENV_RUN_DIR)
    if env:
        return Path(env)
    if fallback is not None:
        return fallback
    raise UsageError(f"--out is required when ${ENV_RUN_DIR} is not set")


def parse_args(argv: Sequence[str] | None = None) -> Command:
    """Parse ``argv`` into a ``Command``; exits with status 2 on usage errors."""
    parser = build_parser()
    options = parser.parse_args(argv)
    cmd = Command(verb=options.verb, options=options)
    try:
        if options.verb in ("synth", "train", "ablate"):
            cmd.paths["out"] = _default_out(options)
        elif options.verb in ("score", "eval", "grid"):
            if options.verb == "eval" and options.scores is not None:
                if options.checkpoint or options.run:
                    raise UsageError("--scores cannot be combined with --checkpoint/--run")
                cmd.paths["out"] = _default_out(options, options.scores.parent)
                return cmd
            if options.checkpoint is None and options.run is None:
                raise UsageError("one of --checkpoint or --run is required")
            if options.data is None:
                raise UsageError("--data is required")
            model_dir = options.run if options.run is not None else options.checkpoint.parent
            if options.verb == "grid":
                cmd.paths["out"] = (options.out if options.out is not None
                                    else _default_out(options, model_dir) / "grid.png")
            else:
                cmd.paths["out"] = _default_out(options, model_dir)
    except UsageError as exc:
        parser.error(str(exc))
    return cmd


def _manifest(path: Path) -> SplitManifest:
    return load_manifest(path / "manifest.csv" if path.is_dir() else path)


def _load_model(options: argparse.Namespace) -> TrainState:
    path = options.checkpoint if options.checkpoint is not None else latest_checkpoint(options.run)
    return load_checkpoint(path)


def _write_roc(path: Path, scores, labels) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("fpr", "tpr", "threshold"))
        for row in roc_points(scores, labels):
            writer.writerow(tuple(repr(v) for v in row))


def _score(cmd: Command) -> tuple[ScoreTable, Path]:
    opts = cmd.options
    state = _load_model(opts)
    records = _manifest(opts.data).split(opts.split)
    table = score_dataset(state, records, batch_size=state.config.batch_size)
    out = cmd.paths["out"]
    out.mkdir(parents=True, exist_ok=True)
    failed = sum(not r.ok for r in table.records)
    if failed:
        logger.warning("%d of %d images could not be scored", failed, len(table.records))
    return table, table.write_csv(out / "scores.csv")


def run_command(cmd: Command) -> int:
    """Execute a parsed command and return the process exit status."""
    opts, out = cmd.options, cmd.paths.get("out")
    if cmd.verb == "synth":
        spec = SyntheticSpec(
            image_size=opts.image_size, n_train_normal=opts.n_train,
            n_val_normal=opts.n_val_normal, n_val_abnormal=opts.n_val_abnormal,
            n_test_normal=opts.n_normal, n_test_abnormal=opts.n_abnormal,
            anomaly_kind=opts.anomaly, seed=opts.seed,
        )
        manifest = generate_synthetic_dataset(spec, out)
        print(f"wrote {len(manifest.train)} train, {len(manifest.val)} val, "
              f"{len(manifest.test)} test images to {out}")
        print(f"manifest={out / 'manifest.csv'}")
    elif cmd.verb == "train":
        config = cmd.config or resolve_config(opts)
        _, history = train(config, _manifest(opts.data), run_dir=out, resume=opts.resume)
        last = history[-1]
        print(f"epochs={last.epoch} recon={last.recon:.6f} total={last.total:.6f}")
        print(f"run_dir={out}")
    elif cmd.verb == "score":
        table, path = _score(cmd)
        print(f"scored {len(table.valid())}/{len(table.records)} images")
        print(f"scores={path}")
    elif cmd.verb == "eval":
        if opts.scores is not None:
            scores, labels = read_score_csv(opts.scores)
        else:
            table, path = _score(cmd)
            scores, labels = table.raw_scores, table.labels
            print(f"scores={path}")
        auc = roc_auc(scores, labels)
        out.mkdir(parents=True, exist_ok=True)
        _write_roc(out / "roc.csv", scores, labels)
        print(f"n={len(labels)} abnormal={int(labels.sum())}")
        print(f"AUC={auc:.6f}")
    elif cmd.verb == "ablate":
        config = cmd.config or resolve_config(opts)
        results = run_ablation(config, _manifest(opts.data), seeds=opts.seeds,
                               variants=opts.variants, out_dir=out)
        print(format_ablation_table(results))
        print(f"summary={out / 'ablation_summary.csv'}")
        if any(r.failures for r in results):
            return 1
    elif cmd.verb == "grid":
        state = _load_model(opts)
        records = _manifest(opts.data).split(opts.split)[: opts.count]
        if not records:
            raise ValueError(f"split {opts.split!r} is empty")
        path = export_reconstruction_grid(state, records, out, columns=opts.columns)
        print(f"grid={path}")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    cmd = parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if cmd.options.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if cmd.verb in ("train", "ablate"):
            cmd.config = resolve_config(cmd.options)
        return run_command(cmd)
    except (ValueError, OSError, RuntimeError) as exc:
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
