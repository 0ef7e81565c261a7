"""Skip-connected autoencoder, second encoder and discriminator.

All three networks share one convolutional encoder topology: ``n_levels - 1``
stride-2 4x4 convolutions (channels doubling from ``base_channels``) followed
by a valid 4x4 convolution down to a ``1 x 1`` map. Batch norm and leaky ReLU
follow every convolution except the first (which has leaky ReLU only) and the
final projection. The decoder mirrors the encoder with transposed
convolutions and concatenates the encoder activation of matching resolution
before each upsampling step. Nothing is concatenated across the latent
bottleneck.

Example:
    >>> arch = ArchitectureConfig()
    >>> params = init_params(arch, seed=0)
    >>> x = torch.zeros(2, 1, 64, 64)
    >>> x_recon, enc = unet_forward(params, x)
    >>> x_recon.shape, enc.latent.shape
    (torch.Size([2, 1, 64, 64]), torch.Size([2, 100]))
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

FINAL_SPATIAL = 4


@dataclass(frozen=True)
class ArchitectureConfig:
    image_size: int = 64
    latent_dim: int = 100
    base_channels: int = 64
    n_levels: int = 5
    kernel: int = 4
    leaky_slope: float = 0.2
    noise_std: float = 0.1
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.kernel != 4:
            raise ValueError(f"kernel must be 4, got {self.kernel}")
        if self.n_levels < 2:
            raise ValueError(f"n_levels must be >= 2, got {self.n_levels}")
        expected = FINAL_SPATIAL * 2 ** (self.n_levels - 1)
        if self.image_size != expected:
            raise ValueError(
                f"image_size {self.image_size} does not fit n_levels={self.n_levels} "
                f"(needs {expected}); use ArchitectureConfig.for_image_size"
            )
        if self.latent_dim < 1 or self.base_channels < 1:
            raise ValueError("latent_dim and base_channels must be >= 1")
        if self.noise_std < 0 or self.init_std < 0:
            raise ValueError("noise_std and init_std must be >= 0")

    @classmethod
    def for_image_size(cls, image_size: int, **kwargs) -> ArchitectureConfig:
        """Pick ``n_levels`` so the encoder reaches a 4x4 map before the latent conv."""
        levels = math.log2(image_size / FINAL_SPATIAL) + 1
        if levels < 2 or not levels.is_integer():
            raise ValueError(f"image_size must be 4 * 2**k with k >= 1, got {image_size}")
        return cls(image_size=image_size, n_levels=int(levels), **kwargs)

    def channels(self) -> list[int]:
        """Channel count of each stride-2 block, shallowest first."""
        return [self.base_channels * 2**i for i in range(self.n_levels - 1)]


@dataclass
class EncoderOutput:
    latent: torch.Tensor
    features: list[torch.Tensor]


def _block(arch: ArchitectureConfig, c_in: int, c_out: int, norm: bool) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(c_in, c_out, 4, 2, 1, bias=False)]
    if norm:
        layers.append(nn.BatchNorm2d(c_out))
    layers.append(nn.LeakyReLU(arch.leaky_slope))
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    """Convolutional encoder returning the latent code and per-block activations.

    Args:
        arch: Architecture description.
        out_dim: Channels of the final valid convolution. ``arch.latent_dim``
            for the encoders, 1 for the discriminator.
    """

    def __init__(self, arch: ArchitectureConfig, out_dim: int | None = None) -> None:
        super().__init__()
        chans = arch.channels()
        self.blocks = nn.ModuleList(
            _block(arch, c_in, c_out, norm=i > 0)
            for i, (c_in, c_out) in enumerate(zip([1, *chans[:-1]], chans))
        )
        self.project = nn.Conv2d(chans[-1], out_dim or arch.latent_dim, 4, 1, 0, bias=False)
        self.image_size = arch.image_size

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        if x.ndim != 4 or tuple(x.shape[1:]) != (1, self.image_size, self.image_size):
            raise ValueError(
                f"expected input of shape (B, 1, {self.image_size}, {self.image_size}), got {tuple(x.shape)}"
            )
        features = []
        h = x
        for block in self.blocks:
            h = block(h)
            features.append(h)
        return EncoderOutput(latent=self.project(h).flatten(1), features=features)


class Decoder(nn.Module):
    """Transposed-convolution decoder consuming encoder skips, deepest first."""

    def __init__(self, arch: ArchitectureConfig) -> None:
        super().__init__()
        chans = arch.channels()
        slope = arch.leaky_slope
        self.latent_dim = arch.latent_dim
        self.stem = nn.Sequential(
            nn.ConvTranspose2d(arch.latent_dim, chans[-1], 4, 1, 0, bias=False),
            nn.BatchNorm2d(chans[-1]),
            nn.LeakyReLU(slope),
        )
        ups: list[nn.Module] = []
        # after concatenation the input to each upsampling step has 2x channels
        for c_skip, c_out in zip(chans[::-1][:-1], chans[::-1][1:]):
            ups.append(
                nn.Sequential(
                    nn.ConvTranspose2d(2 * c_skip, c_out, 4, 2, 1, bias=False),
                    nn.BatchNorm2d(c_out),
                    nn.LeakyReLU(slope),
                )
            )
        ups.append(nn.Sequential(nn.ConvTranspose2d(2 * chans[0], 1, 4, 2, 1, bias=False), nn.Tanh()))
        self.ups = nn.ModuleList(ups)

    def forward(self, latent: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        h = self.stem(latent.view(-1, self.latent_dim, 1, 1))
        for up, skip in zip(self.ups, reversed(skips)):
            h = up(torch.cat([h, skip], dim=1))
        return h


class Discriminator(nn.Module):
    def __init__(self, arch: ArchitectureConfig) -> None:
        super().__init__()
        self.encoder = Encoder(arch, out_dim=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x).latent.view(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


class ModelParams(nn.Module):
    """Container for the four trainable networks.

    ``u_enc`` and ``u_dec`` form the autoencoder, ``enc2`` re-encodes its
    output, ``disc`` judges realism. ``enc2`` and ``u_enc`` share topology but
    not weights.
    """

    NETWORKS = ("u_enc", "u_dec", "enc2", "disc")

    def __init__(self, arch: ArchitectureConfig) -> None:
        super().__init__()
        self.arch = arch
        self.u_enc = Encoder(arch)
        self.u_dec = Decoder(arch)
        self.enc2 = Encoder(arch)
        self.disc = Discriminator(arch)

    def network(self, name: str) -> nn.Module:
        if name not in self.NETWORKS:
            raise KeyError(name)
        return getattr(self, name)


def init_params(
    arch: ArchitectureConfig, seed: int = 0, dtype: torch.dtype = torch.float32
) -> ModelParams:
    """Build all networks with seeded Gaussian weights.

    Conv weights are drawn from ``N(0, arch.init_std**2)``; batch-norm scales
    from ``N(1, 0.02**2)`` with zero shifts.
    """
    params = ModelParams(arch).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name in ModelParams.NETWORKS:
            for module in params.network(name).modules():
                if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                    w = torch.randn(module.weight.shape, generator=gen, dtype=torch.float64)
                    module.weight.copy_(w * arch.init_std)
                elif isinstance(module, nn.BatchNorm2d):
                    s = torch.randn(module.weight.shape, generator=gen, dtype=torch.float64)
                    module.weight.copy_(1.0 + 0.02 * s)
                    module.bias.zero_()
                    module.reset_running_stats()
    return params


def _noise_generator(noise: torch.Generator | int | None) -> torch.Generator | None:
    if isinstance(noise, int):
        return torch.Generator().manual_seed(noise)
    return noise


def unet_forward(
    params: ModelParams,
    x: torch.Tensor,
    noise: torch.Generator | int | None = None,
    train_mode: bool = False,
) -> tuple[torch.Tensor, EncoderOutput]:
    """Reconstruct ``x`` through the skip-connected autoencoder.

    In ``train_mode`` additive Gaussian noise of std ``arch.noise_std`` is
    drawn from ``noise`` (a generator or an integer seed) and added to the
    input, and batch norm uses batch statistics. Inference is noise-free.
    """
    params.u_enc.train(train_mode)
    params.u_dec.train(train_mode)
    std = params.arch.noise_std
    if train_mode and std > 0:
        eps = torch.randn(x.shape, generator=_noise_generator(noise), dtype=x.dtype)
        x = x + std * eps
    enc = params.u_enc(x)
    return params.u_dec(enc.latent, enc.features), enc


def encoder_forward(params: ModelParams, x_recon: torch.Tensor, train_mode: bool = False) -> EncoderOutput:
    params.enc2.train(train_mode)
    return params.enc2(x_recon)


def discriminator_forward(
    params: ModelParams, x: torch.Tensor, train_mode: bool = False, logits: bool = False
) -> torch.Tensor:
    """Probability that each image is real, shape ``(B,)``.

    With ``logits=True`` the pre-sigmoid scores are returned instead.
    """
    params.disc.train(train_mode)
    return params.disc.logits(x) if logits else params.disc(x)
