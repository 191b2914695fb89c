"""Bidirectional latent interaction: a shared trunk over the concatenated
noisy and conditional latents emits paired residual corrections, one for each
side, at every denoising step. Head outputs are zero-initialized so an
untrained module is an exact no-op."""

from __future__ import annotations

import torch
import torch.nn as nn

from .blocks import make_block, timestep_embedding, zero_init

LATENT_CHANNELS = 4


class InteractionHead(nn.Module):
    def __init__(self, in_ch: int, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, 2 * width, 3, padding=1)
        self.conv2 = nn.Conv2d(2 * width, max(width // 4, 4), 3, padding=1)
        self.act = nn.LeakyReLU(0.2)
        self.out = zero_init(nn.Conv2d(max(width // 4, 4), LATENT_CHANNELS, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.act(self.conv2(self.conv1(x))))


class LatentInteraction(nn.Module):
    """Residual exchange module: (x_t, cond) -> (delta_x, delta_m).

    ``time_embed`` is experimental and off by default; the literal contract
    takes no timestep input.
    """

    def __init__(self, width: int = 48, block: str = "conv", time_embed: bool = False):
        super().__init__()
        in_ch = 2 * LATENT_CHANNELS
        self.time_embed = time_embed
        self.time_dim = 32 if time_embed else None
        if time_embed:
            self.time_proj = nn.Linear(self.time_dim, width)
        self.conv_in = nn.Conv2d(in_ch, width, 3, padding=1)
        self.block = make_block(block, width)
        self.conv_mid = nn.Conv2d(width, width, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)
        self.conv_out = nn.Conv2d(width, width // 2, 1)
        self.head_x = InteractionHead(width // 2, width)
        self.head_m = InteractionHead(width // 2, width)

    def forward(
        self, x_t: torch.Tensor, cond: torch.Tensor, t=None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if x_t.shape != cond.shape:
            raise ValueError(f"shape mismatch: {tuple(x_t.shape)} vs {tuple(cond.shape)}")
        h = self.conv_in(torch.cat([x_t, cond], dim=1))
        if self.time_embed and t is not None:
            ts = torch.as_tensor(t, dtype=torch.long, device=x_t.device)
            if ts.ndim == 0:
                ts = ts.expand(x_t.shape[0])
            emb = timestep_embedding(ts, self.time_dim).to(h.dtype)
            h = h + self.time_proj(emb)[:, :, None, None]
        h = self.block(h)
        h = self.conv_out(self.act(self.conv_mid(h)))
        return self.head_x(h), self.head_m(h)


def interact(module: LatentInteraction, x_t: torch.Tensor, cond: torch.Tensor, t=None):
    """Residual pair for one denoising step."""
    return module(x_t, cond, t)


def apply_interaction(
    module: LatentInteraction | None, x_t: torch.Tensor, cond: torch.Tensor, t=None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return the corrected (noisy, conditional) latents; identity when no module."""
    if module is None:
        return x_t, cond
    delta_x, delta_m = module(x_t, cond, t)
    return x_t + delta_x, cond + delta_m
