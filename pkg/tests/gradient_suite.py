"""Central finite-difference checks of autograd gradients for every loss term.

Used by ``test_gradients.py`` and the acceptance run. The networks are a
2-level 8x8 configuration in float64 with batch norm in training mode and a
fixed input-noise draw, i.e. exactly what a training step differentiates.
"""

from __future__ import annotations

from collections.abc import Callable

import torch

from ocgan.losses import (
    LossWeights,
    adversarial_losses,
    adversarial_losses_from_logits,
    feature_consistency_loss,
    generator_objective,
    latent_consistency_loss,
    recon_loss,
)
from ocgan.networks import (
    ArchitectureConfig,
    ModelParams,
    discriminator_forward,
    encoder_forward,
    init_params,
    unet_forward,
)

STEP = 1e-6
MAX_REL_ERROR = 1e-4
ARCH = ArchitectureConfig(image_size=8, n_levels=2, base_channels=3, latent_dim=5, init_std=0.3)


def _setup(seed: int = 0) -> tuple[ModelParams, torch.Tensor]:
    params = init_params(ARCH, seed=seed, dtype=torch.float64)
    x = torch.rand(4, 1, 8, 8, generator=torch.Generator().manual_seed(seed + 100), dtype=torch.float64)
    return params, 2 * x - 1


def _forward(params: ModelParams, x: torch.Tensor):
    x_recon, enc = unet_forward(params, x, noise=1234, train_mode=True)
    enc2 = encoder_forward(params, x_recon, train_mode=True)
    return x_recon, enc, enc2


def loss_functions() -> dict[str, tuple[Callable[[ModelParams, torch.Tensor], torch.Tensor], tuple[str, ...]]]:
    """Name -> (loss(params, x), networks whose weights are perturbed)."""
    gen = ("u_enc", "u_dec")

    def l_r(p, x):
        x_recon, _, _ = _forward(p, x)
        return recon_loss(x, x_recon)

    def l_a_disc(p, x):
        x_recon, _, _ = _forward(p, x)
        d, _ = adversarial_losses(discriminator_forward(p, x, True), discriminator_forward(p, x_recon.detach(), True))
        return d

    def l_a_disc_logits(p, x):
        x_recon, _, _ = _forward(p, x)
        d, _ = adversarial_losses_from_logits(
            discriminator_forward(p, x, True, logits=True),
            discriminator_forward(p, x_recon.detach(), True, logits=True),
        )
        return d

    def l_a_gen(saturating, logits):
        def f(p, x):
            x_recon, _, _ = _forward(p, x)
            if logits:
                r = discriminator_forward(p, x, True, logits=True)
                fk = discriminator_forward(p, x_recon, True, logits=True)
                return adversarial_losses_from_logits(r, fk, saturating)[1]
            r = discriminator_forward(p, x, True)
            fk = discriminator_forward(p, x_recon, True)
            return adversarial_losses(r, fk, saturating)[1]
        return f

    def l_e(p, x):
        _, enc, enc2 = _forward(p, x)
        return latent_consistency_loss(enc.latent, enc2.latent)

    def l_f(p, x):
        _, enc, enc2 = _forward(p, x)
        return feature_consistency_loss(enc.features, enc2.features)

    def total(p, x):
        x_recon, enc, enc2 = _forward(p, x)
        adv = adversarial_losses(discriminator_forward(p, x, True), discriminator_forward(p, x_recon, True))[1]
        return generator_objective(
            recon_loss(x, x_recon), adv,
            latent_consistency_loss(enc.latent, enc2.latent),
            feature_consistency_loss(enc.features, enc2.features),
            LossWeights(),
        ).total

    return {
        "L_R": (l_r, gen),
        "L_A disc": (l_a_disc, ("disc",)),
        "L_A disc (logits)": (l_a_disc_logits, ("disc",)),
        "L_A gen non-saturating": (l_a_gen(False, False), gen),
        "L_A gen saturating": (l_a_gen(True, False), gen),
        "L_A gen non-saturating (logits)": (l_a_gen(False, True), gen),
        "L_A gen saturating (logits)": (l_a_gen(True, True), gen),
        "L_E": (l_e, (*gen, "enc2")),
        "L_F": (l_f, (*gen, "enc2")),
        "L total": (total, (*gen, "enc2")),
    }


def max_relative_error(name: str, n_coords: int = 12, seed: int = 0) -> float:
    """Worst per-coordinate relative error between autograd and central differences.

    ``n_coords`` random weight entries are checked in every weight tensor of
    the perturbed networks.
    """
    fn, networks = loss_functions()[name]
    params, x = _setup(seed)
    tensors = [p for n in networks for p in params.network(n).parameters()]
    params.zero_grad(set_to_none=True)
    fn(params, x).backward()
    analytic = [torch.zeros_like(t) if t.grad is None else t.grad.detach().clone() for t in tensors]

    rng = torch.Generator().manual_seed(seed + 7)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, analytic):
            flat, gflat = t.view(-1), g.view(-1)
            idx = torch.randperm(flat.numel(), generator=rng)[:n_coords]
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + STEP
                up = fn(params, x).item()
                flat[i] = orig - STEP
                down = fn(params, x).item()
                flat[i] = orig
                numeric = (up - down) / (2 * STEP)
                scale = max(abs(numeric), abs(gflat[i].item()), 1e-7)
                worst = max(worst, abs(numeric - gflat[i].item()) / scale)
    return worst
