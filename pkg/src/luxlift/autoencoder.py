"""Small variational autoencoder defining the 4-channel latent space used by
every conditional and diffusion tensor in the pipeline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .blocks import NormResidualBlock, norm_groups
from .imaging import to_batch

logger = logging.getLogger(__name__)

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0
LATENT_CHANNELS = 4


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; ``step`` holds the offending step index."""

    def __init__(self, step: int, message: str | None = None):
        super().__init__(message or f"training diverged (non-finite loss) at step {step}")
        self.step = step


@dataclass
class VaeConfig:
    compression: int = 8
    widths: tuple[int, ...] = (24, 64, 128)

    def __post_init__(self) -> None:
        stages = int(math.log2(self.compression))
        if 2**stages != self.compression:
            raise ValueError(f"compression must be a power of two, got {self.compression}")
        if len(self.widths) != stages:
            raise ValueError(f"need {stages} stage widths for compression {self.compression}")


class VAE(nn.Module):
    """Strided conv encoder to (H/s, W/s, 2*4) moments and a mirrored decoder.

    The decoder ends in a sigmoid, so decoded images always lie in [0, 1].
    """

    def __init__(self, config: VaeConfig | None = None):
        super().__init__()
        cfg = config or VaeConfig()
        self.config = cfg
        ws = cfg.widths

        enc: list[nn.Module] = []
        in_ch = 3
        for w in ws:
            enc.append(nn.Conv2d(in_ch, w, 3, stride=2, padding=1))
            enc.append(NormResidualBlock(w))
            in_ch = w
        enc.append(nn.GroupNorm(norm_groups(in_ch), in_ch))
        enc.append(nn.SiLU())
        head = nn.Conv2d(in_ch, 2 * LATENT_CHANNELS, 3, padding=1)
        # Start near-deterministic: a strongly negative logvar makes early
        # reconstructions usable instead of noise-dominated.
        with torch.no_grad():
            head.bias[LATENT_CHANNELS:].fill_(-6.0)
        enc.append(head)
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(LATENT_CHANNELS, ws[-1], 3, padding=1)]
        rev = list(reversed(ws))
        for i, w in enumerate(rev):
            dec.append(NormResidualBlock(w))
            out_w = rev[i + 1] if i + 1 < len(rev) else rev[-1]
            dec.append(nn.Upsample(scale_factor=2, mode="nearest"))
            dec.append(nn.Conv2d(w, out_w, 3, padding=1))
        dec.append(NormResidualBlock(rev[-1]))
        dec.append(nn.GroupNorm(norm_groups(rev[-1]), rev[-1]))
        dec.append(nn.SiLU())
        dec.append(nn.Conv2d(rev[-1], 3, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

        self.param_count = sum(p.numel() for p in self.parameters())
        logger.info("VAE constructed: %d parameters", self.param_count)

    def encode_moments(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if images.shape[1] != 3:
            raise ValueError(f"expected 3-channel input, got {images.shape[1]}")
        if images.shape[2] % self.config.compression or images.shape[3] % self.config.compression:
            raise ValueError(
                f"spatial size {tuple(images.shape[2:])} not divisible by s={self.config.compression}"
            )
        moments = self.encoder(images)
        mean, logvar = moments.chunk(2, dim=1)
        return mean, torch.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)

    def encode(
        self,
        images: torch.Tensor,
        sample: bool = False,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Mean latent, or a reparameterized sample when ``sample`` is set."""
        mean, logvar = self.encode_moments(images)
        if not sample:
            return mean
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
        return mean + torch.exp(0.5 * logvar) * noise

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != LATENT_CHANNELS:
            raise ValueError(f"expected {LATENT_CHANNELS}-channel latent, got {z.shape[1]}")
        return torch.sigmoid(self.decoder(z))


def vae_loss(
    img: torch.Tensor,
    recon: torch.Tensor,
    mean: torch.Tensor,
    logvar: torch.Tensor,
    kl_weight: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Mean-squared reconstruction plus ``kl_weight`` times the summed KL to N(0, I).

    Returns (total, recon_mse, kl_sum). KL is summed over latent elements, so
    it is 0.5 per element for mean 1 / logvar 0.
    """
    if img.shape != recon.shape:
        raise ValueError(f"shape mismatch: {tuple(img.shape)} vs {tuple(recon.shape)}")
    if mean.shape != logvar.shape:
        raise ValueError(f"shape mismatch: {tuple(mean.shape)} vs {tuple(logvar.shape)}")
    recon_mse = torch.mean((img - recon) ** 2)
    kl = 0.5 * torch.sum(mean**2 + torch.exp(logvar) - 1.0 - logvar)
    return recon_mse + kl_weight * kl, recon_mse, kl


@dataclass
class VaeTrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    kl_weight: float = 1e-6
    seed: int = 0
    vae: VaeConfig = field(default_factory=VaeConfig)


def train_vae(
    images: np.ndarray, cfg: VaeTrainConfig
) -> tuple[VAE, list[float]]:
    """Train a VAE on clean images; returns the model and the per-step loss curve."""
    if images.shape[0] < 500:
        raise ValueError(f"at least 500 training images required, got {images.shape[0]}")
    torch.manual_seed(cfg.seed)
    model = VAE(cfg.vae)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.0, 0.999))
    idx_rng = np.random.default_rng(cfg.seed)
    data = to_batch(images)
    history: list[float] = []
    for step in range(cfg.steps):
        batch = data[idx_rng.integers(0, data.shape[0], size=cfg.batch_size)]
        mean, logvar = model.encode_moments(batch)
        noise = torch.randn(mean.shape)
        z = mean + torch.exp(0.5 * logvar) * noise
        recon = model.decode(z)
        loss, _, _ = vae_loss(batch, recon, mean, logvar, cfg.kl_weight)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return model, history


class LatentCodec:
    """Frozen VAE plus the latent scale factor; the E/D everything else uses.

    ``scale`` normalizes latents to roughly unit variance so the diffusion
    side sees a consistent signal-to-noise regime.
    """

    def __init__(self, vae: VAE, scale: float = 1.0):
        self.vae = vae
        self.scale = float(scale)

    @property
    def compression(self) -> int:
        return self.vae.config.compression

    def encode(
        self,
        images: torch.Tensor,
        sample: bool = False,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        return self.vae.encode(images, sample=sample, generator=generator) * self.scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.vae.decode(z / self.scale)


def latent_scale_from(vae: VAE, images: np.ndarray, limit: int = 256) -> float:
    """Reciprocal standard deviation of mean latents over a sample of images."""
    with torch.no_grad():
        batch = to_batch(images[:limit])
        latents = vae.encode(batch)
    std = float(latents.std())
    if not np.isfinite(std) or std <= 0:
        raise ValueError(f"degenerate latent std {std}")
    return 1.0 / std
