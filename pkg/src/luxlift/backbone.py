"""The generative stack: a small latent U-Net denoiser (frozen after
pre-training), its ControlNet-style conditional module with zero-initialized
injections, and the pixel-space restorer that produces the initial enhanced
image."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import NormResidualBlock, norm_groups, timestep_embedding, zero_init
from .diffusion import NoiseSchedule, q_sample
from .imaging import from_tensor, to_tensor
from .interaction import apply_interaction


class UntrainedModelError(RuntimeError):
    pass


def _as_batch_t(t, batch: int, device) -> torch.Tensor:
    ts = torch.as_tensor(t, dtype=torch.long, device=device)
    if ts.ndim == 0:
        ts = ts.expand(batch)
    return ts


class UNetDenoiser(nn.Module):
    """Three-resolution U-Net over 4-channel latents with per-block timestep
    embedding; decoder skips optionally receive additive control features."""

    def __init__(
        self,
        in_channels: int = 4,
        out_channels: int = 4,
        widths: tuple[int, int, int] = (32, 64, 96),
        time_dim: int | None = 128,
    ):
        super().__init__()
        w0, w1, w2 = widths
        self.widths = widths
        self.time_dim = time_dim
        if time_dim:
            self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.conv_in = nn.Conv2d(in_channels, w0, 3, padding=1)
        self.down_block0 = NormResidualBlock(w0, time_dim)
        self.down0 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.down_block1 = NormResidualBlock(w1, time_dim)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.down_block2 = NormResidualBlock(w2, time_dim)
        self.mid = NormResidualBlock(w2, time_dim)
        self.up1 = nn.Conv2d(w2, w1, 3, padding=1)
        self.cat1 = nn.Conv2d(2 * w1, w1, 1)
        self.up_block1 = NormResidualBlock(w1, time_dim)
        self.up0 = nn.Conv2d(w1, w0, 3, padding=1)
        self.cat0 = nn.Conv2d(2 * w0, w0, 1)
        self.up_block0 = NormResidualBlock(w0, time_dim)
        self.norm_out = nn.GroupNorm(norm_groups(w0), w0)
        self.conv_out = nn.Conv2d(w0, out_channels, 3, padding=1)

    def _embed(self, t, batch: int, device, dtype) -> torch.Tensor | None:
        if not self.time_dim:
            return None
        ts = _as_batch_t(t, batch, device)
        return self.time_mlp(timestep_embedding(ts, self.time_dim).to(dtype))

    def encode_features(self, x: torch.Tensor, t_emb) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h0 = self.down_block0(self.conv_in(x), t_emb)
        h1 = self.down_block1(self.down0(h0), t_emb)
        h2 = self.down_block2(self.down1(h1), t_emb)
        return h0, h1, h2

    def forward(self, x: torch.Tensor, t, control: list[torch.Tensor] | None = None) -> torch.Tensor:
        """Predict eps for state ``x`` at timestep ``t``.

        ``control`` is a per-resolution feature bundle (finest first) added to
        the decoder skip paths; empty control means the frozen unconditional
        prediction.
        """
        t_emb = self._embed(t, x.shape[0], x.device, x.dtype)
        h0, h1, h2 = self.encode_features(x, t_emb)
        if control is not None:
            h0 = h0 + control[0]
            h1 = h1 + control[1]
            h2 = h2 + control[2]
        h = self.mid(h2, t_emb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up_block1(self.cat1(torch.cat([self.up1(h), h1], dim=1)), t_emb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up_block0(self.cat0(torch.cat([self.up0(h), h0], dim=1)), t_emb)
        return self.conv_out(F.silu(self.norm_out(h)))


class ControlModule(nn.Module):
    """Trainable copy of the denoiser encoder plus zero-initialized 1x1
    projections; at initialization every emitted feature is exactly zero."""

    def __init__(self, in_channels: int = 4, widths: tuple[int, int, int] = (32, 64, 96)):
        super().__init__()
        w0, w1, w2 = widths
        self.conv_in = nn.Conv2d(in_channels, w0, 3, padding=1)
        self.down_block0 = NormResidualBlock(w0, None)
        self.down0 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.down_block1 = NormResidualBlock(w1, None)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.down_block2 = NormResidualBlock(w2, None)
        self.proj0 = zero_init(nn.Conv2d(w0, w0, 1))
        self.proj1 = zero_init(nn.Conv2d(w1, w1, 1))
        self.proj2 = zero_init(nn.Conv2d(w2, w2, 1))

    def forward(self, latent: torch.Tensor) -> list[torch.Tensor]:
        """Per-resolution features aligned with the denoiser decoder, finest first."""
        if latent.shape[1] != self.conv_in.in_channels:
            raise ValueError(f"expected {self.conv_in.in_channels}-channel latent, got {latent.shape[1]}")
        h0 = self.down_block0(self.conv_in(latent))
        h1 = self.down_block1(self.down0(h0))
        h2 = self.down_block2(self.down1(h1))
        return [self.proj0(h0), self.proj1(h1), self.proj2(h2)]


def make_control_from(denoiser: UNetDenoiser) -> ControlModule:
    """ControlNet convention: initialize the control encoder as a copy of the
    frozen denoiser encoder (projections stay zero)."""
    control = ControlModule(denoiser.conv_in.in_channels, denoiser.widths)
    src = denoiser.state_dict()
    dst = control.state_dict()
    for name in dst:
        if name in src and not name.startswith("proj"):
            dst[name] = src[name].clone()
    control.load_state_dict(dst)
    return control


class Restorer(nn.Module):
    """Image-to-image U-Net producing the initial enhanced estimate in [0, 1]."""

    def __init__(self, widths: tuple[int, int, int] = (16, 32, 48)):
        super().__init__()
        self.net = UNetDenoiser(in_channels=3, out_channels=3, widths=widths, time_dim=None)
        self.register_buffer("trained_flag", torch.zeros(1))

    @property
    def trained(self) -> bool:
        return bool(self.trained_flag.item() > 0.5)

    def mark_trained(self) -> None:
        self.trained_flag.fill_(1.0)

    def forward(self, low: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(low, 0))


def restore_initial(restorer: Restorer, low: np.ndarray) -> np.ndarray:
    """Run the trained restorer on a single image."""
    if not restorer.trained:
        raise UntrainedModelError("restorer has not been trained (stage 1 missing)")
    with torch.no_grad():
        out = restorer(to_tensor(low)[None])
    return from_tensor(out[0])


def diffusion_loss(
    denoiser: UNetDenoiser,
    control: ControlModule | None,
    x0: torch.Tensor,
    cond: torch.Tensor | None,
    sched: NoiseSchedule,
    t: np.ndarray,
    noise: torch.Tensor,
    interaction=None,
) -> torch.Tensor:
    """Standard eps-prediction MSE with optional control conditioning and
    per-step bidirectional interaction."""
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    x_t = q_sample(x0, sched, t, noise)
    cond_in = cond
    x_in = x_t
    if interaction is not None and cond is not None:
        x_in, cond_in = apply_interaction(interaction, x_t, cond, t)
    feats = control(cond_in) if (control is not None and cond_in is not None) else None
    eps_hat = denoiser(x_in, t, feats)
    return torch.mean((eps_hat - noise) ** 2)
