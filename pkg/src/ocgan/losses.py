"""Loss terms of the adversarial one-class objective.

The generator side (autoencoder plus second encoder) minimises

    lambda1 * recon + lambda2 * adv_gen + lambda3 * latent + lambda4 * feature

with ``lambda4 = 1`` by default. The discriminator minimises ``adv_disc``.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, fields

import torch
from torch.nn import functional as F  # noqa: N812

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Trade-off weights. Training requires all of them positive; zero is
    accepted here so a scorer can switch individual terms off."""

    lambda1: float = 20.0
    lambda2: float = 4.0
    lambda3: float = 8.0
    lambda4: float = 1.0

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{f.name} must be finite and >= 0, got {value}")

    def require_positive(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be > 0, got {getattr(self, f.name)}")


@dataclass
class LossBreakdown:
    """Per-step loss values; entries are tensors during training, floats once logged."""

    recon: torch.Tensor | float
    adv_gen: torch.Tensor | float
    adv_disc: torch.Tensor | float
    latent: torch.Tensor | float
    feature: torch.Tensor | float
    total: torch.Tensor | float

    def as_floats(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if torch.is_tensor(v) else float(v)
        return out


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def recon_loss(x: torch.Tensor, x_recon: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all elements."""
    _check_same_shape(x, x_recon, "recon_loss")
    return (x - x_recon).abs().mean()


def adversarial_losses(
    d_real: torch.Tensor, d_fake: torch.Tensor, saturating: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Binary cross-entropy losses for the discriminator and the generator.

    Args:
        d_real: Discriminator probabilities on real images.
        d_fake: Discriminator probabilities on reconstructions.
        saturating: Use the literal minimax generator loss
            ``mean(log(1 - d_fake))`` instead of the non-saturating
            ``-mean(log(d_fake))``.

    Returns:
        ``(disc_loss, gen_loss)``. Probabilities are clamped to
        ``[1e-7, 1 - 1e-7]`` before taking logs.

    Raises:
        ValueError: If any probability is NaN or outside ``[0, 1]``.
    """
    for name, p in (("d_real", d_real), ("d_fake", d_fake)):
        if p.numel() and not bool(((p >= 0) & (p <= 1)).all()):
            raise ValueError(f"{name} contains values outside [0, 1]")
    real = d_real.clamp(PROB_EPS, 1 - PROB_EPS)
    fake = d_fake.clamp(PROB_EPS, 1 - PROB_EPS)
    disc_loss = -torch.log(real).mean() - torch.log1p(-fake).mean()
    return disc_loss, generator_adversarial_loss(d_fake, saturating)


def generator_adversarial_loss(d_fake: torch.Tensor, saturating: bool = False) -> torch.Tensor:
    """Generator half of :func:`adversarial_losses`."""
    if d_fake.numel() and not bool(((d_fake >= 0) & (d_fake <= 1)).all()):
        raise ValueError("d_fake contains values outside [0, 1]")
    fake = d_fake.clamp(PROB_EPS, 1 - PROB_EPS)
    if saturating:
        return torch.log1p(-fake).mean()
    return -torch.log(fake).mean()


def adversarial_losses_from_logits(
    real_logits: torch.Tensor, fake_logits: torch.Tensor, saturating: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Same losses as :func:`adversarial_losses`, taking pre-sigmoid scores.

    Values agree with the probability form wherever the probabilities lie
    inside the clamp margin. Outside it the gradient stays informative
    instead of vanishing, so a saturated discriminator can still recover.
    """
    disc_loss = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    return disc_loss, generator_adversarial_loss_from_logits(fake_logits, saturating)


def generator_adversarial_loss_from_logits(fake_logits: torch.Tensor, saturating: bool = False) -> torch.Tensor:
    # log(sigmoid(l)) = -softplus(-l); log(1 - sigmoid(l)) = -softplus(l)
    if saturating:
        return -F.softplus(fake_logits).mean()
    return F.softplus(-fake_logits).mean()


def latent_consistency_loss(z: torch.Tensor, z_prime: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between two latent codes."""
    _check_same_shape(z, z_prime, "latent_consistency_loss")
    return (z - z_prime).pow(2).mean()


def feature_consistency_loss(
    features_u: Sequence[torch.Tensor], features_e: Sequence[torch.Tensor]
) -> torch.Tensor:
    """Sum over layers of the per-layer mean squared difference."""
    if len(features_u) != len(features_e):
        raise ValueError(f"feature lists differ in length: {len(features_u)} vs {len(features_e)}")
    if not features_u:
        raise ValueError("feature lists are empty")
    total = None
    for layer, (fu, fe) in enumerate(zip(features_u, features_e)):
        _check_same_shape(fu, fe, f"feature_consistency_loss layer {layer}")
        term = (fu - fe).pow(2).mean()
        total = term if total is None else total + term
    return total


def generator_objective(
    recon: torch.Tensor | float,
    adv_gen: torch.Tensor | float,
    latent: torch.Tensor | float,
    feature: torch.Tensor | float,
    weights: LossWeights = LossWeights(),
    adv_disc: torch.Tensor | float = 0.0,
) -> LossBreakdown:
    """Weighted generator objective.

    ``adv_disc`` is carried through for logging only and does not enter the
    total.
    """
    terms = {"recon": recon, "adv_gen": adv_gen, "latent": latent, "feature": feature}
    for name, value in terms.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise ValueError(f"non-finite {name} term: {v}")
    total = (
        weights.lambda1 * recon
        + weights.lambda2 * adv_gen
        + weights.lambda3 * latent
        + weights.lambda4 * feature
    )
    return LossBreakdown(recon=recon, adv_gen=adv_gen, adv_disc=adv_disc,
                         latent=latent, feature=feature, total=total)
