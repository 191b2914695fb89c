"""Staged training orchestration: stage 0 pre-trains the VAE and the
unconditional backbone on clean images, stage 1 trains the pixel-space
restorer on pairs, and stage 2 freezes everything pre-trained (hash-pinned)
and trains the control, visual encoder, prior diffusion, latent predictor,
and interaction modules under the combined loss."""

from __future__ import annotations

import csv
import logging
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .autoencoder import TrainingDivergedError, VaeConfig, VaeTrainConfig, latent_scale_from, LatentCodec, train_vae
from .backbone import Restorer, UNetDenoiser, diffusion_loss
from .checkpoint import Checkpoint, module_hash
from .diffusion import q_sample
from .imaging import to_batch
from .pipeline import ModelBundle, TrainConfig, refine_condition
from .refinement import build_pyramid, refinement_losses
from .synth import PairedDataset

logger = logging.getLogger(__name__)

LOSS_COMPONENTS = ("l_diff", "l_g", "l_r", "l_gp", "l_rp")

# Architecture fields that stage 2 must inherit unchanged from stage 0/1.
ARCH_FIELDS = (
    "image_size",
    "compression",
    "vae_widths",
    "denoiser_widths",
    "restorer_widths",
    "backbone_steps",
    "backbone_beta",
)


class PrerequisiteError(RuntimeError):
    pass


def set_seed(seed: int) -> None:
    """Route all randomness (init, noise draws, data sampling) through one seed."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


@dataclass
class StageData:
    """Frozen per-image tensors precomputed once per stage-2 run."""

    low: torch.Tensor
    initial: torch.Tensor
    base_latent: torch.Tensor
    l_m: torch.Tensor
    pixel_target: torch.Tensor | None

    def take(self, idx: np.ndarray) -> "StageData":
        sel = torch.from_numpy(np.ascontiguousarray(idx))
        return StageData(
            low=self.low[sel],
            initial=self.initial[sel],
            base_latent=self.base_latent[sel],
            l_m=self.l_m[sel],
            pixel_target=self.pixel_target[sel] if self.pixel_target is not None else None,
        )


def prepare_stage2_data(bundle: ModelBundle, dataset: PairedDataset, pixel: bool) -> StageData:
    cfg = bundle.config
    lows, initials, bases, lms, pts = [], [], [], [], []
    with torch.no_grad():
        for start in range(0, len(dataset), 64):
            low = to_batch(dataset.low[start : start + 64])
            clean = to_batch(dataset.clean[start : start + 64])
            initial = bundle.restorer(low)
            base_src = initial if cfg.condition_source == "enhanced" else low
            lows.append(low)
            initials.append(initial)
            bases.append(bundle.codec.encode(base_src))
            l_m = bundle.codec.encode(clean)
            lms.append(l_m)
            if pixel:
                pts.append(bundle.codec.decode(l_m))
    return StageData(
        low=torch.cat(lows),
        initial=torch.cat(initials),
        base_latent=torch.cat(bases),
        l_m=torch.cat(lms),
        pixel_target=torch.cat(pts) if pixel else None,
    )


@dataclass
class NoisePack:
    """All stochastic draws for one training step, from an explicit generator,
    so a loss evaluation is a deterministic function of (params, batch, pack)."""

    prior_noise: torch.Tensor
    t_diff: np.ndarray
    eps_diff: torch.Tensor

    @staticmethod
    def draw(
        batch: int,
        latent_hw: tuple[int, int],
        prior_channels: int,
        backbone_steps: int,
        generator: torch.Generator,
        dtype: torch.dtype = torch.float32,
    ) -> "NoisePack":
        h, w = latent_hw
        prior_noise = torch.randn((batch, prior_channels, h, w), generator=generator, dtype=dtype)
        t = torch.randint(1, backbone_steps + 1, (batch,), generator=generator).numpy()
        eps = torch.randn((batch, 4, h, w), generator=generator, dtype=dtype)
        return NoisePack(prior_noise=prior_noise, t_diff=t, eps_diff=eps)


def total_loss(
    bundle: ModelBundle, batch: StageData, pack: NoisePack
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Combined stage-2 objective and its five named components.

    The returned scalar is exactly l_diff + lambda1*(l_g + l_r) +
    lambda2*(l_gp + l_rp); terms with a zero weight are never added (and the
    pixel terms are never computed), so disabled paths contribute no
    gradients at all.
    """
    cfg = bundle.config
    zero = torch.zeros(())
    comps: dict[str, torch.Tensor] = {k: zero for k in LOSS_COMPONENTS}
    pixel = cfg.lambda2 != 0.0
    if cfg.refinement:
        h_m = build_pyramid(batch.l_m) if cfg.use_pyramid else batch.l_m
        out, prior = refine_condition(
            bundle,
            batch.low,
            batch.initial,
            batch.base_latent,
            prior_noise=pack.prior_noise,
            prior_target=h_m if (cfg.use_prior and cfg.use_generative) else None,
        )
        losses = refinement_losses(
            prior,
            h_m,
            out.refined,
            batch.l_m,
            codec=bundle.codec,
            pixel=pixel,
            pixel_target=batch.pixel_target,
        )
        comps.update(losses)
        cond = out.refined
    else:
        cond = batch.base_latent
    comps["l_diff"] = diffusion_loss(
        bundle.denoiser,
        bundle.control,
        batch.l_m,
        cond,
        bundle.backbone_sched,
        pack.t_diff,
        pack.eps_diff,
        interaction=bundle.interaction if cfg.interaction else None,
    )
    total = comps["l_diff"]
    if cfg.lambda1 != 0.0:
        total = total + cfg.lambda1 * (comps["l_g"] + comps["l_r"])
    if cfg.lambda2 != 0.0:
        total = total + cfg.lambda2 * (comps["l_gp"] + comps["l_rp"])
    return total, comps


def _train_denoiser(
    denoiser: UNetDenoiser, codec: LatentCodec, clean: np.ndarray, cfg: TrainConfig
) -> list[dict]:
    """Unconditional eps-prediction pre-training on clean latents."""
    with torch.no_grad():
        latents = torch.cat(
            [codec.encode(to_batch(clean[i : i + 64])) for i in range(0, clean.shape[0], 64)]
        )
    sched = ModelBundle(config=cfg).backbone_sched
    opt = torch.optim.Adam(denoiser.parameters(), lr=cfg.backbone_lr, betas=(0.0, 0.999))
    rng = np.random.default_rng(cfg.seed + 1)
    rows = []
    for step in range(cfg.backbone_train_steps):
        idx = rng.integers(0, latents.shape[0], size=cfg.backbone_batch)
        x0 = latents[torch.from_numpy(idx)]
        t = rng.integers(1, sched.steps + 1, size=cfg.backbone_batch)
        noise = torch.randn_like(x0)
        x_t = q_sample(x0, sched, t, noise)
        loss = torch.mean((denoiser(x_t, t) - noise) ** 2)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append({"phase": "backbone", "step": step, "loss": float(loss.detach())})
    return rows


def _train_restorer(restorer: Restorer, dataset: PairedDataset, cfg: TrainConfig) -> list[dict]:
    low = to_batch(dataset.low)
    clean = to_batch(dataset.clean)
    opt = torch.optim.Adam(restorer.parameters(), lr=cfg.restorer_lr, betas=(0.0, 0.999))
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for step in range(cfg.restorer_steps):
        idx = torch.from_numpy(rng.integers(0, low.shape[0], size=cfg.restorer_batch))
        pred = restorer(low[idx])
        loss = torch.mean((pred - clean[idx]) ** 2)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append({"phase": "restorer", "step": step, "loss": float(loss.detach())})
    restorer.mark_trained()
    return rows


def _require_sections(prereq: Checkpoint | None, names: tuple[str, ...], stage: int) -> Checkpoint:
    if prereq is None:
        raise PrerequisiteError(f"stage {stage} requires a prerequisite checkpoint with {names}")
    missing = [n for n in names if n not in prereq.sections]
    if missing:
        raise PrerequisiteError(f"stage {stage} prerequisite checkpoint is missing sections {missing}")
    return prereq


def _check_arch_match(config: TrainConfig, prereq: Checkpoint) -> None:
    base = TrainConfig.from_dict(prereq.config["train_config"])
    for name in ARCH_FIELDS:
        if getattr(config, name) != getattr(base, name):
            raise PrerequisiteError(
                f"config field {name!r} ({getattr(config, name)}) does not match the "
                f"prerequisite checkpoint ({getattr(base, name)})"
            )


def run_stage(
    stage: int,
    config: TrainConfig,
    dataset: PairedDataset,
    prereq: Checkpoint | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Train one stage and return (checkpoint, loss-curve rows)."""
    if stage == 0:
        set_seed(config.seed)
        vae_cfg = VaeTrainConfig(
            steps=config.vae_steps,
            batch_size=config.vae_batch,
            lr=config.vae_lr,
            kl_weight=config.kl_weight,
            seed=config.seed,
            vae=VaeConfig(compression=config.compression, widths=tuple(config.vae_widths)),
        )
        vae, vae_hist = train_vae(dataset.clean, vae_cfg)
        codec = LatentCodec(vae, latent_scale_from(vae, dataset.clean))
        rows = [{"phase": "vae", "step": i, "loss": v} for i, v in enumerate(vae_hist)]
        denoiser = UNetDenoiser(widths=tuple(config.denoiser_widths))
        rows += _train_denoiser(denoiser, codec, dataset.clean, config)
        bundle = ModelBundle(config=config, codec=codec, denoiser=denoiser)
        return bundle.to_checkpoint(step=config.vae_steps + config.backbone_train_steps), rows

    if stage == 1:
        prereq = _require_sections(prereq, ("vae", "backbone"), stage)
        _check_arch_match(config, prereq)
        set_seed(config.seed)
        bundle = ModelBundle.from_checkpoint(prereq)
        bundle.restorer = Restorer(tuple(config.restorer_widths))
        rows = _train_restorer(bundle.restorer, dataset, config)
        bundle.config = config
        return bundle.to_checkpoint(step=config.restorer_steps), rows

    if stage == 2:
        prereq = _require_sections(prereq, ("vae", "backbone", "restorer"), stage)
        _check_arch_match(config, prereq)
        set_seed(config.seed)
        loaded = ModelBundle.from_checkpoint(prereq)
        bundle = ModelBundle(
            config=config, codec=loaded.codec, denoiser=loaded.denoiser, restorer=loaded.restorer
        )
        bundle.init_stage2_modules()
        for mod in bundle.frozen_stage2().values():
            mod.requires_grad_(False)
        frozen_before = {name: module_hash(mod) for name, mod in bundle.frozen_stage2().items()}

        pixel = config.lambda2 != 0.0 and config.refinement
        data = prepare_stage2_data(bundle, dataset, pixel=pixel)
        params = [p for mod in bundle.trainable_stage2().values() for p in mod.parameters()]
        opt = torch.optim.Adam(params, lr=config.lr, betas=(0.0, 0.999))
        idx_rng = np.random.default_rng(config.seed)
        gen = torch.Generator().manual_seed(config.seed)
        latent_hw = tuple(data.l_m.shape[2:])
        rows = []
        for step in range(config.steps):
            idx = idx_rng.integers(0, data.low.shape[0], size=config.batch_size)
            batch = data.take(idx)
            pack = NoisePack.draw(
                config.batch_size,
                latent_hw,
                config.prior_state_channels,
                config.backbone_steps,
                gen,
            )
            total, comps = total_loss(bundle, batch, pack)
            if not torch.isfinite(total):
                raise TrainingDivergedError(step)
            opt.zero_grad()
            total.backward()
            opt.step()
            row = {"step": step, "total": float(total.detach())}
            row.update({k: float(v.detach()) for k, v in comps.items()})
            rows.append(row)
        frozen_after = {name: module_hash(mod) for name, mod in bundle.frozen_stage2().items()}
        changed = [n for n in frozen_before if frozen_before[n] != frozen_after[n]]
        if changed:
            raise RuntimeError(f"frozen modules modified during stage 2: {changed}")
        return bundle.to_checkpoint(step=config.steps), rows

    raise ValueError(f"unknown stage {stage}; expected 0, 1, or 2")


def write_curves(path: str | Path, rows: list[dict]) -> None:
    """Loss curves as CSV with one column per logged component."""
    if not rows:
        return
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
