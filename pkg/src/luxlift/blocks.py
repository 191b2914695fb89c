"""Shared network building blocks: residual conv blocks, windowed attention,
timestep embeddings, and zero-initialized projections."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(device=t.device)
    args = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


def zero_init(module: nn.Module) -> nn.Module:
    """Zero all weights and biases; used for control projections and residual heads."""
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResidualBlock(nn.Module):
    """Two 3x3 convs with LeakyReLU and an identity skip (table-style, no norm)."""

    def __init__(self, channels: int, time_dim: int | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)
        self.time_proj = nn.Linear(time_dim, channels) if time_dim else None

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.act(self.conv1(x))
        if self.time_proj is not None and t_emb is not None:
            h = h + self.time_proj(t_emb.to(h.dtype))[:, :, None, None]
        h = self.conv2(h)
        return x + self.act(h)


def norm_groups(channels: int, preferred: int = 8) -> int:
    """Largest group count <= preferred that divides the channel count."""
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class NormResidualBlock(nn.Module):
    """GroupNorm/SiLU residual block with optional additive timestep embedding;
    used by the VAE and the backbone U-Net, where activation scale must stay
    bounded over long training."""

    def __init__(self, channels: int, time_dim: int | None = None, groups: int = 8):
        super().__init__()
        g = norm_groups(channels, groups)
        self.norm1 = nn.GroupNorm(g, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(g, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, channels) if time_dim else None

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_proj is not None and t_emb is not None:
            h = h + self.time_proj(t_emb.to(h.dtype))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class WindowAttention(nn.Module):
    """Multi-head self-attention over non-overlapping square windows."""

    def __init__(self, channels: int, window: int = 8, head_dim: int = 32):
        super().__init__()
        self.window = window
        self.heads = max(1, channels // head_dim)
        self.norm = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, channels * 3)
        self.proj = nn.Linear(channels, channels)
        self.mlp_norm = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, channels * 2), nn.GELU(), nn.Linear(channels * 2, channels)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        win = min(self.window, h, w)
        pad_h = (-h) % win
        pad_w = (-w) % win
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h))
        hp, wp = x.shape[2], x.shape[3]
        tokens = x.permute(0, 2, 3, 1)
        tokens = tokens.reshape(b, hp // win, win, wp // win, win, c)
        tokens = tokens.permute(0, 1, 3, 2, 4, 5).reshape(-1, win * win, c)

        y = self.norm(tokens)
        qkv = self.qkv(y).reshape(tokens.shape[0], win * win, 3, self.heads, -1)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        scale = q.shape[-1] ** -0.5
        attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(tokens.shape[0], win * win, c)
        tokens = tokens + self.proj(y)
        tokens = tokens + self.mlp(self.mlp_norm(tokens))

        tokens = tokens.reshape(b, hp // win, wp // win, win, win, c)
        tokens = tokens.permute(0, 1, 3, 2, 4, 5).reshape(b, hp, wp, c)
        out = tokens.permute(0, 3, 1, 2)
        if pad_h or pad_w:
            out = out[:, :, :h, :w]
        return out


class AttentionPair(nn.Module):
    """Two windowed-attention blocks, the configured alternative to a conv block."""

    def __init__(self, channels: int, window: int = 8, head_dim: int = 32):
        super().__init__()
        self.blocks = nn.ModuleList(
            [WindowAttention(channels, window, head_dim), WindowAttention(channels, window, head_dim)]
        )

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor | None = None) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


def make_block(kind: str, channels: int, time_dim: int | None = None) -> nn.Module:
    if kind == "conv":
        return ResidualBlock(channels, time_dim)
    if kind == "attention":
        return AttentionPair(channels)
    raise ValueError(f"unknown block kind: {kind!r}")
