"""Alternating adversarial training on normal-only images.

Each batch runs one autoencoder forward pass on the noisy input, then
``d_steps`` discriminator updates against the detached reconstruction, then
one joint update of the autoencoder and (when present) the second encoder.
Runs are fully determined by ``TrainConfig.seed``.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, uses_disc, uses_enc2
from .data import ImageBatch, ImageRecord, SplitManifest, batch_iter
from .losses import (
    LossBreakdown,
    adversarial_losses_from_logits,
    feature_consistency_loss,
    generator_adversarial_loss_from_logits,
    generator_objective,
    latent_consistency_loss,
    recon_loss,
)
from .metrics import roc_auc
from .scoring import score_dataset
from .networks import ModelParams, discriminator_forward, encoder_forward, init_params, unet_forward

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ocgan-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_FIELDS = ("recon", "adv_gen", "adv_disc", "latent", "feature", "total")


class OneClassViolation(ValueError):
    """An abnormal image reached the training data."""


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite."""


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable or has an unexpected version."""


@dataclass
class EpochMetrics:
    epoch: int
    steps: int
    recon: float
    adv_gen: float
    adv_disc: float
    latent: float
    feature: float
    total: float
    val_auc: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainState:
    config: TrainConfig
    params: ModelParams
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam | None
    opt_e: torch.optim.Adam | None
    noise_gen: torch.Generator
    epoch: int = 0
    step: int = 0
    history: list[EpochMetrics] = field(default_factory=list)
    best_val_auc: float | None = None

    def optimizers(self) -> dict[str, torch.optim.Adam | None]:
        return {"opt_g": self.opt_g, "opt_d": self.opt_d, "opt_e": self.opt_e}


def _derived_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _adam(modules: Iterable[torch.nn.Module], config: TrainConfig) -> torch.optim.Adam:
    params = [p for m in modules for p in m.parameters()]
    return torch.optim.Adam(params, lr=config.lr, betas=(config.adam_beta1, config.adam_beta2))


def init_state(config: TrainConfig) -> TrainState:
    """Fresh parameters and optimizers for ``config``."""
    params = init_params(config.arch, seed=config.seed, dtype=config.torch_dtype)
    gen_modules = [params.u_enc, params.u_dec]
    opt_e = None
    if uses_enc2(config.variant):
        if config.separate_enc2_optimizer:
            opt_e = _adam([params.enc2], config)
        else:
            gen_modules.append(params.enc2)
    return TrainState(
        config=config,
        params=params,
        opt_g=_adam(gen_modules, config),
        opt_d=_adam([params.disc], config) if uses_disc(config.variant) else None,
        opt_e=opt_e,
        noise_gen=torch.Generator().manual_seed(_derived_seed(config.seed, 1)),
    )


def _check_finite(value: torch.Tensor, what: str, step: int) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDiverged(f"non-finite {what} at step {step}")


def _check_grads(opt: torch.optim.Optimizer, step: int) -> None:
    for group in opt.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingDiverged(f"non-finite gradient at step {step}")


def train_step(state: TrainState, batch: ImageBatch) -> LossBreakdown:
    """One discriminator phase and one generator phase; mutates ``state``.

    Returns the step's losses as floats. Terms of modules the variant lacks
    are reported as zero and their networks are neither run nor updated.
    """
    if bool((batch.labels != 0).any()):
        raise OneClassViolation("training batch contains abnormal images")
    config = state.config
    params = state.params
    x = batch.data.to(config.torch_dtype)
    has_d, has_e = uses_disc(config.variant), uses_enc2(config.variant)

    x_recon, enc = unet_forward(params, x, noise=state.noise_gen, train_mode=True)

    disc_loss = torch.zeros((), dtype=x.dtype)
    if has_d:
        fake = x_recon.detach()
        for _ in range(config.d_steps):
            real_logits = discriminator_forward(params, x, train_mode=True, logits=True)
            fake_logits = discriminator_forward(params, fake, train_mode=True, logits=True)
            disc_loss, _ = adversarial_losses_from_logits(real_logits, fake_logits)
            _check_finite(disc_loss, "discriminator loss", state.step)
            state.opt_d.zero_grad(set_to_none=True)
            disc_loss.backward()
            _check_grads(state.opt_d, state.step)
            state.opt_d.step()

    zero = torch.zeros((), dtype=x.dtype)
    recon = recon_loss(x, x_recon)
    adv_gen = latent = feature = zero
    if has_d:
        fake_logits = discriminator_forward(params, x_recon, train_mode=True, logits=True)
        adv_gen = generator_adversarial_loss_from_logits(fake_logits, saturating=config.saturating_gen)
    if has_e:
        enc2 = encoder_forward(params, x_recon, train_mode=True)
        latent = latent_consistency_loss(enc.latent, enc2.latent)
        feature = feature_consistency_loss(enc.features, enc2.features)

    losses = generator_objective(recon, adv_gen, latent, feature, config.weights, adv_disc=disc_loss)
    _check_finite(losses.total, "generator loss", state.step)
    gen_opts = [o for o in (state.opt_g, state.opt_e) if o is not None]
    for opt in gen_opts:
        opt.zero_grad(set_to_none=True)
    losses.total.backward()
    for opt in gen_opts:
        _check_grads(opt, state.step)
        opt.step()
    state.step += 1
    return LossBreakdown(**losses.as_floats())


def _val_auc(state: TrainState, records: list[ImageRecord], cache: dict) -> float | None:
    labels = {r.label for r in records}
    if labels != {0, 1}:
        return None
    table = score_dataset(state, records, batch_size=state.config.batch_size, cache=cache)
    return roc_auc(table.raw_scores, table.labels)


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Write weights, optimizer moments, counters, RNG state and metric history."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "params": state.params.state_dict(),
        **{name: (opt.state_dict() if opt is not None else None)
           for name, opt in state.optimizers().items()},
        "noise_rng": state.noise_gen.get_state(),
        "epoch": state.epoch,
        "step": state.step,
        "history": [asdict(m) for m in state.history],
        "best_val_auc": state.best_val_auc,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises a zoo of errors on corrupt archives
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an ocgan checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch in {path}: file has {payload.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    state = init_state(TrainConfig.from_dict(payload["config"]))
    state.params.load_state_dict(payload["params"])
    for name, opt in state.optimizers().items():
        if (opt is None) != (payload[name] is None):
            raise CheckpointError(f"{path}: optimizer {name} does not match the variant")
        if opt is not None:
            opt.load_state_dict(payload[name])
    state.noise_gen.set_state(payload["noise_rng"])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.history = [EpochMetrics(**m) for m in payload["history"]]
    state.best_val_auc = payload["best_val_auc"]
    return state


def _write_metrics(run_dir: Path, history: list[EpochMetrics]) -> None:
    with (run_dir / "metrics.jsonl").open("w", encoding="utf-8") as fh:
        for m in history:
            fh.write(m.to_json() + "\n")


def _prune_checkpoints(run_dir: Path, epoch: int, keep: int) -> None:
    if keep == 0:
        return
    for old in range(1, epoch - keep + 1):
        (run_dir / f"ckpt_epoch{old}").unlink(missing_ok=True)


def train(
    config: TrainConfig,
    manifest: SplitManifest,
    run_dir: str | Path | None = None,
    resume: TrainState | str | Path | None = None,
    stop_after: int | None = None,
) -> tuple[TrainState, list[EpochMetrics]]:
    """Train on ``manifest.train`` for ``config.epochs`` epochs.

    Args:
        config: Run configuration. Ignored for model settings when resuming,
            except that it must match the checkpoint's configuration.
        manifest: Data splits. Validation AUC is logged each epoch when the
            val split holds both classes.
        run_dir: Where ``config.json``, ``metrics.jsonl`` and checkpoints go.
            Nothing is written when ``None``.
        resume: A state or checkpoint path to continue from.
        stop_after: Stop once this epoch number has finished (for
            interrupted runs).

    Returns:
        The final state and the full per-epoch metric history.
    """
    train_records = manifest.train
    if not train_records:
        raise ValueError("training split is empty")
    bad = [r.path for r in train_records if r.label != 0]
    if bad:
        raise OneClassViolation(f"abnormal in train: {bad[0]} ({len(bad)} total)")

    if resume is None:
        state = init_state(config)
    else:
        state = resume if isinstance(resume, TrainState) else load_checkpoint(resume)
        if state.config != config:
            raise ValueError("resume checkpoint was trained with a different configuration")

    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save_json(out / "config.json")

    cache: dict[str, torch.Tensor] = {}
    size = config.arch.image_size
    last_epoch = config.epochs if stop_after is None else min(stop_after, config.epochs)
    for epoch in range(state.epoch + 1, last_epoch + 1):
        sums = dict.fromkeys(LOSS_FIELDS, 0.0)
        steps = 0
        batches = batch_iter(train_records, config.batch_size, shuffle=True,
                             seed=[config.seed, 2, epoch], image_size=size, cache=cache)
        for batch in batches:
            losses = train_step(state, batch)
            for k in LOSS_FIELDS:
                sums[k] += getattr(losses, k)
            steps += 1
        val_auc = _val_auc(state, manifest.val, cache)
        metrics = EpochMetrics(epoch=epoch, steps=steps, val_auc=val_auc,
                               **{k: v / steps for k, v in sums.items()})
        if not all(math.isfinite(getattr(metrics, k)) for k in LOSS_FIELDS):
            raise TrainingDiverged(f"non-finite epoch means at epoch {epoch}")
        state.epoch = epoch
        state.history.append(metrics)
        improved = val_auc is not None and (state.best_val_auc is None or val_auc > state.best_val_auc)
        if improved:
            state.best_val_auc = val_auc
        logger.info("epoch %d: recon=%.4f total=%.4f val_auc=%s",
                    epoch, metrics.recon, metrics.total, val_auc)
        if out is not None:
            _write_metrics(out, state.history)
            save_checkpoint(state, out / f"ckpt_epoch{epoch}")
            if improved:
                save_checkpoint(state, out / "ckpt_best")
            _prune_checkpoints(out, epoch, config.keep_checkpoints)
    return state, list(state.history)


def latest_checkpoint(run_dir: str | Path) -> Path:
    """Path of the highest-numbered ``ckpt_epoch{N}`` in ``run_dir``."""
    run_dir = Path(run_dir)
    found = []
    for p in run_dir.glob("ckpt_epoch*"):
        suffix = p.name[len("ckpt_epoch"):]
        if suffix.isdigit():
            found.append((int(suffix), p))
    if not found:
        raise FileNotFoundError(f"no ckpt_epoch* checkpoints in {run_dir}")
    return max(found)[1]
