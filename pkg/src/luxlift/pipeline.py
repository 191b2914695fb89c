"""Model bundle assembly and the end-to-end enhancement pipeline: initial
restoration, condition construction (raw or refined), controlled latent
sampling with optional per-step interaction, and decoding."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .autoencoder import VAE, LatentCodec, VaeConfig
from .backbone import ControlModule, Restorer, UNetDenoiser, make_control_from
from .checkpoint import Checkpoint, CheckpointError, section_from_module
from .diffusion import NoiseSchedule, make_schedule, respace_schedule, sample_loop, sample_loop_stochastic
from .imaging import from_tensor, to_tensor
from .interaction import LatentInteraction, apply_interaction
from .refinement import (
    PYRAMID_CHANNELS,
    SPATIAL_CONDITION_CHANNELS,
    LatentPredictor,
    PriorEpsNet,
    VisualEncoder,
    build_pyramid,
    sample_prior,
)


class PipelineError(RuntimeError):
    pass


_TUPLE_FIELDS = {"backbone_beta", "prior_beta", "vae_widths", "denoiser_widths", "restorer_widths"}


@dataclass
class TrainConfig:
    """All knobs for one training run; serialized verbatim into configs,
    manifests, and checkpoints."""

    stage: int = 2
    image_size: int = 64
    compression: int = 8
    batch_size: int = 4
    steps: int = 400
    lr: float = 1e-3
    lambda1: float = 1.0
    lambda2: float = 1.0
    seed: int = 0
    # feature / ablation flags
    refinement: bool = True
    interaction: bool = True
    use_ti: bool = True
    use_tl: bool = True
    use_prior: bool = True
    use_generative: bool = True
    use_pyramid: bool = True
    use_attention: bool = True
    condition_source: str = "enhanced"
    beta_time_embed: bool = False
    block: str = "conv"
    sampler: str = "deterministic"
    # schedules
    backbone_steps: int = 200
    backbone_beta: tuple[float, float] = (1e-4, 0.1)
    inference_steps: int = 20
    prior_steps: int = 4
    prior_beta: tuple[float, float] = (0.8, 0.99)
    # widths
    vae_widths: tuple[int, ...] = (32, 48, 64)
    denoiser_widths: tuple[int, int, int] = (32, 48, 64)
    restorer_widths: tuple[int, int, int] = (16, 32, 48)
    visual_width: int = 12
    refine_width: int = 32
    interact_width: int = 32
    # stage 0/1 budgets
    vae_steps: int = 2600
    vae_lr: float = 2e-3
    vae_batch: int = 8
    kl_weight: float = 1e-6
    backbone_train_steps: int = 1500
    backbone_lr: float = 1e-3
    backbone_batch: int = 16
    restorer_steps: int = 800
    restorer_lr: float = 1e-3
    restorer_batch: int = 8

    def __post_init__(self) -> None:
        for name in ("batch_size", "steps", "image_size", "compression"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.condition_source not in ("enhanced", "low"):
            raise ValueError(f"condition_source must be 'enhanced' or 'low', got {self.condition_source}")
        if self.sampler not in ("deterministic", "ddpm"):
            raise ValueError(f"sampler must be 'deterministic' or 'ddpm', got {self.sampler}")
        for name in _TUPLE_FIELDS:
            setattr(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in _TUPLE_FIELDS:
            d[name] = list(d[name])
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return TrainConfig(**d)

    @property
    def prior_state_channels(self) -> int:
        return PYRAMID_CHANNELS if self.use_pyramid else 4

    @property
    def condition_channels(self) -> int:
        ch = 4  # conditional latent is always an input
        if self.use_ti:
            ch += 3 * self.compression * self.compression
        if self.use_tl:
            ch += SPATIAL_CONDITION_CHANNELS
        return ch

    @property
    def predictor_channels(self) -> int:
        ch = self.condition_channels
        if self.use_prior:
            ch += self.prior_state_channels
        return ch


SECTION_NAMES = (
    "vae",
    "backbone",
    "restorer",
    "control",
    "visual_encoder",
    "prior_eps",
    "predictor",
    "interaction",
)


@dataclass
class ModelBundle:
    """Everything the pipeline needs, with absent modules set to None."""

    config: TrainConfig
    codec: LatentCodec | None = None
    denoiser: UNetDenoiser | None = None
    restorer: Restorer | None = None
    control: ControlModule | None = None
    visual_encoder: VisualEncoder | None = None
    prior: PriorEpsNet | None = None
    predictor: LatentPredictor | None = None
    interaction: LatentInteraction | None = None
    backbone_sched: NoiseSchedule = field(init=False)
    prior_sched: NoiseSchedule = field(init=False)

    def __post_init__(self) -> None:
        cfg = self.config
        self.backbone_sched = make_schedule(cfg.backbone_steps, *cfg.backbone_beta)
        self.prior_sched = make_schedule(cfg.prior_steps, *cfg.prior_beta)

    def init_stage2_modules(self) -> None:
        """Construct the trainable stage-2 set: control plus the four
        refinement/interaction modules enabled by the config."""
        cfg = self.config
        if self.denoiser is None:
            raise PipelineError("cannot initialize stage-2 modules without a backbone")
        self.control = make_control_from(self.denoiser)
        if cfg.refinement:
            if cfg.use_tl:
                self.visual_encoder = VisualEncoder(cfg.compression, cfg.visual_width, cfg.block)
            if cfg.use_prior:
                self.prior = PriorEpsNet(
                    cfg.condition_channels, cfg.prior_state_channels, cfg.refine_width, cfg.block
                )
            self.predictor = LatentPredictor(cfg.predictor_channels, cfg.refine_width, cfg.block)
        if cfg.interaction:
            self.interaction = LatentInteraction(cfg.interact_width, cfg.block, cfg.beta_time_embed)

    def named_modules_present(self) -> dict[str, torch.nn.Module]:
        pairs = {
            "vae": self.codec.vae if self.codec else None,
            "backbone": self.denoiser,
            "restorer": self.restorer,
            "control": self.control,
            "visual_encoder": self.visual_encoder,
            "prior_eps": self.prior,
            "predictor": self.predictor,
            "interaction": self.interaction,
        }
        return {k: v for k, v in pairs.items() if v is not None}

    def trainable_stage2(self) -> dict[str, torch.nn.Module]:
        present = self.named_modules_present()
        return {k: v for k, v in present.items() if k in ("control", "visual_encoder", "prior_eps", "predictor", "interaction")}

    def frozen_stage2(self) -> dict[str, torch.nn.Module]:
        present = self.named_modules_present()
        return {k: v for k, v in present.items() if k in ("vae", "backbone", "restorer")}

    def to_checkpoint(self, step: int = 0) -> Checkpoint:
        sections = {name: section_from_module(mod) for name, mod in self.named_modules_present().items()}
        config = {
            "train_config": self.config.to_dict(),
            "latent_scale": self.codec.scale if self.codec else 1.0,
        }
        return Checkpoint(sections=sections, config=config, step=step)

    @staticmethod
    def from_checkpoint(ckpt: Checkpoint) -> "ModelBundle":
        cfg = TrainConfig.from_dict(ckpt.config["train_config"])
        bundle = ModelBundle(config=cfg)
        if "vae" in ckpt.sections:
            vae = VAE(VaeConfig(compression=cfg.compression, widths=tuple(cfg.vae_widths)))
            vae.load_state_dict(ckpt.state_dict("vae"))
            bundle.codec = LatentCodec(vae, float(ckpt.config.get("latent_scale", 1.0)))
        if "backbone" in ckpt.sections:
            bundle.denoiser = UNetDenoiser(widths=tuple(cfg.denoiser_widths))
            bundle.denoiser.load_state_dict(ckpt.state_dict("backbone"))
        if "restorer" in ckpt.sections:
            bundle.restorer = Restorer(tuple(cfg.restorer_widths))
            bundle.restorer.load_state_dict(ckpt.state_dict("restorer"))
        if "control" in ckpt.sections:
            bundle.control = ControlModule(4, tuple(cfg.denoiser_widths))
            bundle.control.load_state_dict(ckpt.state_dict("control"))
        if "visual_encoder" in ckpt.sections:
            bundle.visual_encoder = VisualEncoder(cfg.compression, cfg.visual_width, cfg.block)
            bundle.visual_encoder.load_state_dict(ckpt.state_dict("visual_encoder"))
        if "prior_eps" in ckpt.sections:
            bundle.prior = PriorEpsNet(
                cfg.condition_channels, cfg.prior_state_channels, cfg.refine_width, cfg.block
            )
            bundle.prior.load_state_dict(ckpt.state_dict("prior_eps"))
        if "predictor" in ckpt.sections:
            bundle.predictor = LatentPredictor(cfg.predictor_channels, cfg.refine_width, cfg.block)
            bundle.predictor.load_state_dict(ckpt.state_dict("predictor"))
        if "interaction" in ckpt.sections:
            bundle.interaction = LatentInteraction(cfg.interact_width, cfg.block, cfg.beta_time_embed)
            bundle.interaction.load_state_dict(ckpt.state_dict("interaction"))
        return bundle


def condition_inputs(
    bundle: ModelBundle, low: torch.Tensor, initial: torch.Tensor, base_latent: torch.Tensor
) -> list[torch.Tensor]:
    """Assemble the lossless condition list [t_i?, t_l?, l_c] per the config flags."""
    cfg = bundle.config
    conds: list[torch.Tensor] = []
    if cfg.use_ti:
        conds.append(F.pixel_unshuffle(initial, cfg.compression))
    if cfg.use_tl:
        if bundle.visual_encoder is None:
            raise PipelineError("config enables t_l but checkpoint has no visual_encoder blob")
        conds.append(bundle.visual_encoder(low))
    conds.append(base_latent)
    return conds


def refine_condition(
    bundle: ModelBundle,
    low: torch.Tensor,
    initial: torch.Tensor,
    base_latent: torch.Tensor,
    *,
    prior_noise: torch.Tensor | None = None,
    prior_target: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
):
    """Produce the refined conditional latent (and the prior it used)."""
    cfg = bundle.config
    if bundle.predictor is None:
        raise PipelineError("refinement requested but checkpoint has no predictor blob")
    conds = condition_inputs(bundle, low, initial, base_latent)
    prior = None
    if cfg.use_prior:
        if bundle.prior is None:
            raise PipelineError("config enables the prior but checkpoint has no prior_eps blob")
        if cfg.use_generative:
            prior = sample_prior(
                bundle.prior,
                bundle.prior_sched,
                conds,
                target=prior_target,
                noise=prior_noise,
                generator=generator,
            )
        else:
            prior = bundle.prior.regress(conds)
    inputs = ([prior] if prior is not None else []) + conds
    out = bundle.predictor(inputs, base_latent, attention=cfg.use_attention)
    return out, prior


def enhance_batch(
    bundle: ModelBundle,
    low: torch.Tensor,
    *,
    refinement: bool,
    interaction: bool,
    seed: int,
    inference_steps: int | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Enhance a batch of low-light images; returns images plus latent
    intermediates (for diagnostics). Deterministic given the seed."""
    cfg = bundle.config
    for name, mod in (("restorer", bundle.restorer), ("vae", bundle.codec), ("backbone", bundle.denoiser), ("control", bundle.control)):
        if mod is None:
            raise PipelineError(f"pipeline requires the {name!r} blob, which is missing from the checkpoint")
    if interaction and bundle.interaction is None:
        raise PipelineError("interaction requested but checkpoint has no interaction blob")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        initial = bundle.restorer(low)
        base_src = initial if cfg.condition_source == "enhanced" else low
        l_c = bundle.codec.encode(base_src)
        inter = {"l_c": l_c}
        if refinement:
            out, prior = refine_condition(bundle, low, initial, l_c, generator=gen)
            cond = out.refined
            inter["l_refined"] = cond
        else:
            cond = l_c
        steps = inference_steps or cfg.inference_steps
        inf_sched, t_map = respace_schedule(bundle.backbone_sched, steps)
        beta = bundle.interaction if interaction else None

        def eps_fn(state: torch.Tensor, local_t: int) -> torch.Tensor:
            t_orig = t_map[local_t - 1]
            x_in, c_in = apply_interaction(beta, state, cond, t_orig)
            return bundle.denoiser(x_in, t_orig, bundle.control(c_in))

        init = torch.randn((low.shape[0], 4, *l_c.shape[2:]), generator=gen, dtype=l_c.dtype)
        if cfg.sampler == "ddpm":
            x0 = sample_loop_stochastic(init, eps_fn, inf_sched, generator=gen)
        else:
            x0 = sample_loop(init, eps_fn, inf_sched)
        images = bundle.codec.decode(x0)
    return images.clamp(0.0, 1.0), inter


def enhance_pipeline(
    bundle: ModelBundle,
    low: np.ndarray,
    *,
    refinement: bool = True,
    interaction: bool = True,
    seed: int = 0,
    inference_steps: int | None = None,
) -> np.ndarray:
    """Single-image restoration: restore, condition, sample, decode."""
    out, _ = enhance_batch(
        bundle,
        to_tensor(low)[None],
        refinement=refinement,
        interaction=interaction,
        seed=seed,
        inference_steps=inference_steps,
    )
    return from_tensor(out[0])
