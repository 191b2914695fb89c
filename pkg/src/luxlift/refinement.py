"""Conditional latent refinement: lossless condition inputs, a pyramidal
generative prior produced by a lightweight latent diffusion, and gated
(attention-aware) prediction of the refined conditional latent."""

from __future__ import annotations

from dataclasses import dataclass

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import LatentCodec
from .blocks import make_block, timestep_embedding
from .diffusion import NoiseSchedule, q_sample, sample_loop

SPATIAL_CONDITION_CHANNELS = 64
PYRAMID_BANDS = 5
PYRAMID_CHANNELS = 4 * PYRAMID_BANDS


class VisualEncoder(nn.Module):
    """Strided conv encoder taking the raw low-light image to a 64-channel
    map at latent resolution; its job is to pass spatial detail through while
    filtering degradation artifacts."""

    def __init__(self, compression: int = 8, base_width: int = 16, block: str = "conv"):
        super().__init__()
        stages = int(math.log2(compression))
        if 2**stages != compression:
            raise ValueError(f"compression must be a power of two, got {compression}")
        self.compression = compression
        layers: list[nn.Module] = []
        in_ch = 3
        for i in range(stages):
            w = base_width * (2**i)
            layers += [nn.Conv2d(in_ch, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2), make_block(block, w)]
            in_ch = w
        layers += [
            nn.Conv2d(in_ch, in_ch, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(in_ch, SPATIAL_CONDITION_CHANNELS, 1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[2] % self.compression or images.shape[3] % self.compression:
            raise ValueError(
                f"spatial size {tuple(images.shape[2:])} not divisible by s={self.compression}"
            )
        return self.net(images)


def build_pyramid(latent: torch.Tensor) -> torch.Tensor:
    """Stack the latent with its bilinear down/up resamplings at factors
    2, 4, 8, 16 (clamped to the spatial size) into 20 channels.

    Band 0 is the input itself, bit-exact. Bilinear resampling preserves
    constants and is linear in the input.
    """
    b, c, h, w = latent.shape
    bands = [latent]
    for k in range(1, PYRAMID_BANDS):
        f = min(2**k, h, w)
        down = F.interpolate(latent, size=(h // f, w // f), mode="bilinear", align_corners=False)
        bands.append(F.interpolate(down, size=(h, w), mode="bilinear", align_corners=False))
    return torch.cat(bands, dim=1)


class PriorEpsNet(nn.Module):
    """Noise predictor for the prior diffusion over pyramid latents.

    The trunk consumes the noisy pyramid state; a conditional branch consumes
    the concatenation of the available lossless conditions and is added to
    the trunk features together with a sinusoidal timestep embedding. The
    same network doubles as the capacity-matched direct regressor used by the
    generative-path ablation (single forward pass from zeroed state at t=0).
    """

    def __init__(
        self,
        cond_channels: int,
        state_channels: int = PYRAMID_CHANNELS,
        width: int = 48,
        block: str = "conv",
    ):
        super().__init__()
        self.state_channels = state_channels
        self.cond_channels = cond_channels
        self.time_dim = 32
        self.conv_in = nn.Conv2d(state_channels, width, 3, padding=1)
        self.time_proj = nn.Linear(self.time_dim, width)
        trunk: list[nn.Module] = []
        for _ in range(3):
            trunk += [make_block(block, width), nn.Conv2d(width, width, 3, padding=1), nn.LeakyReLU(0.2)]
        self.trunk = nn.Sequential(*trunk)
        self.conv_out = nn.Conv2d(width, state_channels, 3, padding=1)
        self.cond_branch = nn.Sequential(
            nn.Conv2d(cond_channels, width, 3, padding=1),
            make_block(block, width),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 1),
        )

    def condition(self, conds: list[torch.Tensor]) -> torch.Tensor:
        cat = torch.cat(conds, dim=1)
        if cat.shape[1] != self.cond_channels:
            raise ValueError(f"expected {self.cond_channels} condition channels, got {cat.shape[1]}")
        return self.cond_branch(cat)

    def forward_with_features(self, state: torch.Tensor, t, cond_feats: torch.Tensor) -> torch.Tensor:
        ts = torch.as_tensor(t, dtype=torch.long, device=state.device)
        if ts.ndim == 0:
            ts = ts.expand(state.shape[0])
        emb = self.time_proj(timestep_embedding(ts, self.time_dim).to(state.dtype))
        h = self.conv_in(state) + cond_feats + emb[:, :, None, None]
        return self.conv_out(self.trunk(h))

    def forward(self, state: torch.Tensor, t, conds: list[torch.Tensor]) -> torch.Tensor:
        for c in conds:
            if c.shape[2:] != state.shape[2:]:
                raise ValueError(
                    f"condition spatial size {tuple(c.shape[2:])} != state {tuple(state.shape[2:])}"
                )
        return self.forward_with_features(state, t, self.condition(conds))

    def regress(self, conds: list[torch.Tensor]) -> torch.Tensor:
        """Direct single-pass prediction of the prior (no diffusion)."""
        ref = conds[0]
        zeros = torch.zeros(
            ref.shape[0], self.state_channels, *ref.shape[2:], dtype=ref.dtype, device=ref.device
        )
        return self.forward_with_features(zeros, 0, self.condition(conds))


def sample_prior(
    net: PriorEpsNet,
    sched: NoiseSchedule,
    conds: list[torch.Tensor],
    *,
    target: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Run the full prior diffusion and return the denoised pyramid estimate.

    Training mode (``target`` given) starts from the forward-corrupted target
    at step T; inference mode starts from pure Gaussian noise. Both then
    follow the identical reverse path, which is well-posed because the
    schedule's terminal signal fraction is near zero.
    """
    ref = conds[0]
    shape = (ref.shape[0], net.state_channels, ref.shape[2], ref.shape[3])
    if noise is None:
        noise = torch.randn(shape, generator=generator, dtype=ref.dtype, device=ref.device)
    if noise.shape != shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != {shape}")
    if target is not None:
        if target.shape != shape:
            raise ValueError(f"target shape {tuple(target.shape)} != {shape}")
        init = q_sample(target, sched, sched.steps, noise)
    else:
        init = noise
    feats = net.condition(conds)
    return sample_loop(init, lambda s, t: net.forward_with_features(s, t, feats), sched)


@dataclass
class RefinementOutput:
    """Gated residual refinement: ``refined == base + weights * bias`` exactly."""

    weights: torch.Tensor
    bias: torch.Tensor
    refined: torch.Tensor


def combine_refined(base: torch.Tensor, weights: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return base + weights * bias


class LatentPredictor(nn.Module):
    """Final refined-latent predictor: shared trunk over the concatenated
    prior and conditions, then one specialized two-map head per latent
    channel (gate logit + residual)."""

    def __init__(self, cond_channels: int, width: int = 48, block: str = "conv"):
        super().__init__()
        self.cond_channels = cond_channels
        self.shared = nn.Sequential(
            nn.Conv2d(cond_channels, 2 * width, 3, padding=1),
            make_block(block, 2 * width),
            nn.Conv2d(2 * width, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 1),
        )
        def head() -> nn.Module:
            return nn.Sequential(
                nn.Conv2d(width, width // 2, 3, padding=1),
                make_block(block, width // 2),
                nn.Conv2d(width // 2, max(width // 4, 4), 3, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(max(width // 4, 4), 2, 1),
            )
        self.heads = nn.ModuleList([head() for _ in range(4)])

    def forward(
        self, inputs: list[torch.Tensor], base: torch.Tensor, attention: bool = True
    ) -> RefinementOutput:
        for x in inputs:
            if x.shape[2:] != base.shape[2:]:
                raise ValueError(
                    f"input spatial size {tuple(x.shape[2:])} != base {tuple(base.shape[2:])}"
                )
        cat = torch.cat(inputs, dim=1)
        if cat.shape[1] != self.cond_channels:
            raise ValueError(f"expected {self.cond_channels} input channels, got {cat.shape[1]}")
        feats = self.shared(cat)
        outs = [h(feats) for h in self.heads]
        stacked = torch.stack(outs, dim=1)  # (B, 4, 2, h, w)
        logits = stacked[:, :, 0]
        bias = stacked[:, :, 1]
        if attention:
            weights = torch.sigmoid(logits)
        else:
            weights = torch.ones_like(bias)
        return RefinementOutput(weights=weights, bias=bias, refined=combine_refined(base, weights, bias))


def refinement_losses(
    prior: torch.Tensor | None,
    pyramid_target: torch.Tensor | None,
    refined: torch.Tensor,
    latent_target: torch.Tensor,
    codec: LatentCodec | None = None,
    pixel: bool = True,
    pixel_target: torch.Tensor | None = None,
) -> dict[str, torch.Tensor]:
    """The four refinement losses: latent MSEs for the prior and the refined
    latent, plus their pixel-space counterparts through the frozen decoder.

    The pixel loss for the prior decodes only its full-resolution band (the
    first four channels). When ``pixel`` is false the decoder is never
    touched, so no gradient path through it exists.
    """
    zero = torch.zeros((), dtype=refined.dtype, device=refined.device)
    out: dict[str, torch.Tensor] = {}
    out["l_g"] = torch.mean((prior - pyramid_target) ** 2) if prior is not None else zero
    out["l_r"] = torch.mean((refined - latent_target) ** 2)
    if pixel:
        if codec is None:
            raise ValueError("pixel losses requested but no decoder provided")
        if pixel_target is None:
            pixel_target = codec.decode(latent_target)
        out["l_gp"] = (
            torch.mean((codec.decode(prior[:, :4]) - pixel_target) ** 2) if prior is not None else zero
        )
        out["l_rp"] = torch.mean((codec.decode(refined) - pixel_target) ** 2)
    else:
        out["l_gp"] = zero
        out["l_rp"] = zero
    return out
