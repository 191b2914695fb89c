"""luxlift: desk-scale conditional latent-diffusion low-light enhancement
with generative-prior latent refinement and bidirectional latent interaction."""

__version__ = "0.1.0"

from .imaging import DegradationParams, degrade, depth_to_space, load_image, psnr, save_image, space_to_depth, ssim
from .diffusion import NoiseSchedule, make_schedule, q_sample, reverse_step, sample_loop
from .pipeline import ModelBundle, TrainConfig, enhance_pipeline
from .trainer import run_stage, set_seed, total_loss

__all__ = [
    "DegradationParams",
    "ModelBundle",
    "NoiseSchedule",
    "TrainConfig",
    "degrade",
    "depth_to_space",
    "enhance_pipeline",
    "load_image",
    "make_schedule",
    "psnr",
    "q_sample",
    "reverse_step",
    "run_stage",
    "sample_loop",
    "save_image",
    "set_seed",
    "space_to_depth",
    "ssim",
    "total_loss",
]
