"""Procedural toy-scene generation and paired low-light dataset synthesis.

Scenes mix smooth gradients, filled shapes, and thin glyph-like strokes so
that both large-area fidelity and fine-detail fidelity are exercised. Every
image is a pure function of (seed, index); datasets written to disk are
byte-identical across runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import DegradationParams, degrade, load_image, quantize_u8, save_image

DEGRADE_GAMMA_RANGE = (1.6, 2.6)
DEGRADE_GAIN_RANGE = (0.12, 0.35)
DEGRADE_READ_SIGMA_RANGE = (0.01, 0.04)
DEGRADE_SHOT_RANGE = (0.002, 0.010)


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(round(3 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    out = np.zeros_like(img)
    for i, k in enumerate(kernel):
        out += k * padded[i : i + img.shape[0]]
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    out = np.zeros_like(img)
    for i, k in enumerate(kernel):
        out += k * padded[:, i : i + img.shape[1]]
    return out


def _segment_mask(yy: np.ndarray, xx: np.ndarray, p0, p1, width: float) -> np.ndarray:
    """Soft mask of points within ``width`` of the segment p0-p1."""
    d = np.array(p1, dtype=np.float64) - np.array(p0, dtype=np.float64)
    denom = max(float(d @ d), 1e-9)
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / denom
    t = np.clip(t, 0.0, 1.0)
    cy = p0[0] + t * d[0]
    cx = p0[1] + t * d[1]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.clip(width + 0.5 - dist, 0.0, 1.0)


def toy_scene(size: int, seed: int) -> np.ndarray:
    """Render one procedural scene: gradient base, shapes, glyph strokes."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5CE7E, seed]))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    c0 = rng.uniform(0.25, 0.95, size=3)
    c1 = rng.uniform(0.25, 0.95, size=3)
    if rng.random() < 0.5:
        ang = rng.uniform(0, 2 * np.pi)
        t = (np.cos(ang) * xx + np.sin(ang) * yy) / size
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    else:
        cy, cx = rng.uniform(0, size, size=2)
        t = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / size
        t = np.clip(t, 0.0, 1.0)
    img = c0[None, None, :] + t[:, :, None] * (c1 - c0)[None, None, :]

    for _ in range(rng.integers(1, 3)):
        color = rng.uniform(0.1, 0.95, size=3)
        alpha = rng.uniform(0.6, 1.0)
        kind = rng.integers(0, 3)
        if kind == 0:
            cy, cx = rng.uniform(0, size, size=2)
            r = rng.uniform(size * 0.08, size * 0.25)
            mask = np.clip(r - np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) + 0.5, 0.0, 1.0)
        elif kind == 1:
            y0, y1 = np.sort(rng.uniform(0, size, size=2))
            x0, x1 = np.sort(rng.uniform(0, size, size=2))
            mask = ((yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)).astype(np.float64)
        else:
            p0 = rng.uniform(0, size, size=2)
            p1 = rng.uniform(0, size, size=2)
            mask = _segment_mask(yy, xx, p0, p1, rng.uniform(1.5, 3.0))
        m = (alpha * mask)[:, :, None]
        img = img * (1 - m) + color[None, None, :] * m

    # Text-like rows of short connected strokes; dark-on-light or light-on-dark.
    for _ in range(rng.integers(1, 2)):
        bright = rng.random() < 0.5
        color = rng.uniform(0.85, 1.0, size=3) if bright else rng.uniform(0.0, 0.12, size=3)
        cell = int(rng.integers(max(6, size // 8), max(7, size // 6) + 1))
        n_cells = int(rng.integers(3, 6))
        n_cells = max(1, min(n_cells, (size - 5) // cell))
        y_base = rng.uniform(2, max(3, size - cell - 2))
        x_base = rng.uniform(2, max(3, size - n_cells * cell - 2))
        width = rng.uniform(1.0, 1.6)
        for ci in range(n_cells):
            ox = x_base + ci * cell
            pts = rng.uniform(0, cell - 2, size=(rng.integers(3, 5), 2))
            for a, b in zip(pts[:-1], pts[1:]):
                mask = _segment_mask(yy, xx, (y_base + a[0], ox + a[1]), (y_base + b[0], ox + b[1]), width)
                m = mask[:, :, None]
                img = img * (1 - m) + color[None, None, :] * m

    img = _gaussian_blur(img, 0.8)
    return quantize_u8(np.clip(img, 0.0, 1.0))


def degradation_for(index: int, seed: int) -> DegradationParams:
    """Per-pair capture conditions drawn deterministically from (seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([0xDE64ADE, seed, index]))
    return DegradationParams(
        gamma=float(rng.uniform(*DEGRADE_GAMMA_RANGE)),
        gain=float(rng.uniform(*DEGRADE_GAIN_RANGE)),
        read_noise_sigma=float(rng.uniform(*DEGRADE_READ_SIGMA_RANGE)),
        shot_noise_scale=float(rng.uniform(*DEGRADE_SHOT_RANGE)),
        seed=int(np.random.SeedSequence([0x4015E, seed, index]).generate_state(1)[0]),
    )


def make_pair(index: int, seed: int, size: int) -> tuple[np.ndarray, np.ndarray, DegradationParams]:
    clean = toy_scene(size, seed * 1_000_003 + index)
    params = degradation_for(index, seed)
    low = quantize_u8(degrade(clean, params))
    return clean, low, params


@dataclass
class PairedDataset:
    """In-memory paired dataset; arrays are (N, H, W, 3) float32 on the 8-bit grid."""

    clean: np.ndarray
    low: np.ndarray
    seed: int
    size: int

    def __len__(self) -> int:
        return self.clean.shape[0]

    def split(self, n_holdout: int) -> tuple["PairedDataset", "PairedDataset"]:
        n = len(self) - n_holdout
        if n <= 0:
            raise ValueError(f"cannot hold out {n_holdout} of {len(self)} pairs")
        train = PairedDataset(self.clean[:n], self.low[:n], self.seed, self.size)
        held = PairedDataset(self.clean[n:], self.low[n:], self.seed, self.size)
        return train, held


def synth_dataset(count: int, seed: int, size: int = 64) -> PairedDataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    clean = np.zeros((count, size, size, 3), dtype=np.float32)
    low = np.zeros_like(clean)
    for i in range(count):
        clean[i], low[i], _ = make_pair(i, seed, size)
    return PairedDataset(clean=clean, low=low, seed=seed, size=size)


def write_dataset(out_dir: str | Path, count: int, seed: int, size: int = 64) -> Path:
    """Write a paired dataset as PNGs plus a manifest; deterministic bytes."""
    out = Path(out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "low").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        clean, low, params = make_pair(i, seed, size)
        name = f"{i:05d}.png"
        save_image(clean, out / "clean" / name)
        save_image(low, out / "low" / name)
        records.append(
            {
                "index": i,
                "file": name,
                "gamma": params.gamma,
                "gain": params.gain,
                "read_noise_sigma": params.read_noise_sigma,
                "shot_noise_scale": params.shot_noise_scale,
                "degrade_seed": params.seed,
            }
        )
    manifest = {"count": count, "seed": seed, "size": size, "pairs": records}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_paired_dataset(path: str | Path) -> PairedDataset:
    """Load a dataset directory produced by :func:`write_dataset`."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    count, size = manifest["count"], manifest["size"]
    clean = np.zeros((count, size, size, 3), dtype=np.float32)
    low = np.zeros_like(clean)
    for rec in manifest["pairs"]:
        i = rec["index"]
        clean[i] = load_image(root / "clean" / rec["file"])
        low[i] = load_image(root / "low" / rec["file"])
    return PairedDataset(clean=clean, low=low, seed=manifest["seed"], size=size)
