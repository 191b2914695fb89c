"""Pixel-space utilities: PNG I/O, synthetic low-light degradation, pixel
shuffling between image and latent resolution, and full-reference metrics.

Images are float32 numpy arrays of shape (H, W, 3) with values in [0, 1].
All operations here are pure functions; randomness comes only from explicit
seeds.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

PSNR_CEILING_DB = 100.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class ImagingError(Exception):
    """Base error for pixel-space operations."""


class MissingFileError(ImagingError):
    pass


class UnsupportedFormatError(ImagingError):
    pass


class CorruptDataError(ImagingError):
    pass


class UnwritablePathError(ImagingError):
    pass


class ShapeMismatchError(ImagingError):
    pass


@dataclass(frozen=True)
class DegradationParams:
    """Synthetic low-light capture model: gamma + gain + Poisson-Gaussian noise."""

    gamma: float
    gain: float
    read_noise_sigma: float = 0.0
    shot_noise_scale: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not 0 < self.gain <= 1:
            raise ValueError(f"gain must be in (0, 1], got {self.gain}")
        if not 0 <= self.read_noise_sigma <= 0.2:
            raise ValueError(f"read_noise_sigma must be in [0, 0.2], got {self.read_noise_sigma}")
        if self.shot_noise_scale < 0:
            raise ValueError(f"shot_noise_scale must be >= 0, got {self.shot_noise_scale}")


def validate_image(img: np.ndarray) -> None:
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatchError(f"expected (H, W, 3) array, got {getattr(img, 'shape', None)}")
    if not np.isfinite(img).all():
        raise ImagingError("image contains non-finite values")
    if img.min() < 0 or img.max() > 1:
        raise ImagingError(f"image values outside [0, 1]: [{img.min()}, {img.max()}]")


def load_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit raster file as a float32 (H, W, 3) array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            rgb = im.convert("RGB")
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"not a supported raster format: {path}") from exc
    except OSError as exc:
        raise CorruptDataError(f"failed to decode {path}: {exc}") from exc
    return np.asarray(rgb, dtype=np.float32) / 255.0


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Write an image as 8-bit PNG; round-trip error is at most 1/255 per channel."""
    validate_image(img)
    data = np.round(np.asarray(img, dtype=np.float64) * 255.0).astype(np.uint8)
    try:
        PILImage.fromarray(data, mode="RGB").save(Path(path), format="PNG")
    except (OSError, ValueError) as exc:
        raise UnwritablePathError(f"cannot write {path}: {exc}") from exc


def quantize_u8(img: np.ndarray) -> np.ndarray:
    """Snap values to the 8-bit grid used by the PNG interchange format."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def degrade(clean: np.ndarray, p: DegradationParams) -> np.ndarray:
    """Apply the synthetic low-light model: clip(gain * clean^gamma + noise).

    Shot noise variance is proportional to the attenuated signal; read noise
    is signal-independent. Deterministic given ``p.seed``.
    """
    validate_image(clean)
    rng = np.random.default_rng(p.seed)
    signal = p.gain * np.power(clean.astype(np.float64), p.gamma)
    out = signal
    if p.shot_noise_scale > 0:
        out = out + np.sqrt(p.shot_noise_scale * signal) * rng.standard_normal(clean.shape)
    if p.read_noise_sigma > 0:
        out = out + p.read_noise_sigma * rng.standard_normal(clean.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def space_to_depth(img: np.ndarray, s: int) -> np.ndarray:
    """Losslessly rearrange (H, W, C) into (H/s, W/s, C*s*s).

    This is the pixel-shuffle inverse: each s x s spatial block is folded
    into channels (source channel major, then block row, then block column),
    so no value is created or lost and the tensor-side pixel_unshuffle agrees
    with this layout.
    """
    if s < 1:
        raise ValueError(f"shuffle ratio must be >= 1, got {s}")
    h, w, c = img.shape
    if h % s != 0 or w % s != 0:
        raise ShapeMismatchError(f"dimensions {h}x{w} not divisible by s={s}")
    out = img.reshape(h // s, s, w // s, s, c)
    out = out.transpose(0, 2, 4, 1, 3)
    return np.ascontiguousarray(out.reshape(h // s, w // s, c * s * s))


def depth_to_space(t: np.ndarray, s: int) -> np.ndarray:
    """Exact inverse of :func:`space_to_depth`."""
    if s < 1:
        raise ValueError(f"shuffle ratio must be >= 1, got {s}")
    hs, ws, cs = t.shape
    if cs % (s * s) != 0:
        raise ShapeMismatchError(f"channel count {cs} not divisible by s*s={s * s}")
    c = cs // (s * s)
    out = t.reshape(hs, ws, c, s, s)
    out = out.transpose(0, 3, 1, 4, 2)
    return np.ascontiguousarray(out.reshape(hs * s, ws * s, c))


def psnr(a: np.ndarray, b: np.ndarray, ceiling_db: float = PSNR_CEILING_DB) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images, capped at a finite ceiling."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return ceiling_db
    return min(10.0 * np.log10(1.0 / mse), ceiling_db)


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity over sliding ``window x window`` patches.

    Uniform window, biased (mean-based) moment estimates, constants C1, C2
    for unit range. Channels are scored independently and averaged.
    """
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    if h < window or w < window:
        raise ShapeMismatchError(f"image {h}x{w} smaller than {window}x{window} window")
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]

    def window_means(z: np.ndarray) -> np.ndarray:
        view = np.lib.stride_tricks.sliding_window_view(z, (window, window), axis=(0, 1))
        return view.mean(axis=(-2, -1))

    mu_x = window_means(x)
    mu_y = window_means(y)
    mu_xx = window_means(x * x)
    mu_yy = window_means(y * y)
    mu_xy = window_means(x * y)
    var_x = mu_xx - mu_x * mu_x
    var_y = mu_yy - mu_y * mu_y
    cov = mu_xy - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float(np.mean(num / den))


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, C) numpy image to (C, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()


def to_batch(imgs: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) numpy stack to (N, C, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(imgs.transpose(0, 3, 1, 2))).float()


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """(C, H, W) tensor to a clipped float32 (H, W, C) image."""
    arr = t.detach().cpu().numpy().transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0).astype(np.float32)
