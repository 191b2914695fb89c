"""Analytic-vs-finite-difference gradient checks for every loss, on tiny
float64 networks. These are the numeric ground truth for the training code:
central differences are an independent oracle for autograd-computed
gradients."""

import numpy as np
import pytest
import torch

from luxlift.autoencoder import VAE, LatentCodec, VaeConfig, vae_loss
from luxlift.backbone import Restorer, UNetDenoiser, make_control_from
from luxlift.pipeline import ModelBundle, TrainConfig
from luxlift.trainer import NoisePack, StageData, total_loss
from oracles import grad_check


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        image_size=16,
        compression=4,
        vae_widths=(8, 8),
        denoiser_widths=(4, 8, 8),
        restorer_widths=(4, 8, 8),
        visual_width=4,
        refine_width=8,
        interact_width=8,
        backbone_steps=40,
        backbone_beta=(0.02, 0.4),
        batch_size=2,
        steps=1,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def bundle():
    torch.manual_seed(0)
    cfg = tiny_config()
    vae = VAE(VaeConfig(compression=4, widths=(8, 8))).double()
    restorer = Restorer((4, 8, 8)).double()
    restorer.mark_trained()
    denoiser = UNetDenoiser(widths=(4, 8, 8)).double()
    b = ModelBundle(config=cfg, codec=LatentCodec(vae, 1.0), denoiser=denoiser, restorer=restorer)
    b.init_stage2_modules()
    for m in b.trainable_stage2().values():
        m.double()
    for m in [b.denoiser, b.restorer, b.codec.vae]:
        m.requires_grad_(False)
    return b


@pytest.fixture(scope="module")
def batch(bundle):
    gen = torch.Generator().manual_seed(7)
    def r(*shape, scale=1.0):
        return scale * torch.randn(*shape, generator=gen, dtype=torch.float64)
    low = torch.rand((2, 3, 16, 16), generator=gen, dtype=torch.float64)
    initial = torch.rand((2, 3, 16, 16), generator=gen, dtype=torch.float64)
    l_m = r(2, 4, 4, 4, scale=0.3)
    with torch.no_grad():
        pixel_target = bundle.codec.decode(l_m)
    return StageData(low=low, initial=initial, base_latent=r(2, 4, 4, 4, scale=0.3), l_m=l_m, pixel_target=pixel_target)


@pytest.fixture(scope="module")
def pack(bundle):
    gen = torch.Generator().manual_seed(11)
    return NoisePack.draw(2, (4, 4), bundle.config.prior_state_channels, bundle.config.backbone_steps, gen, dtype=torch.float64)


def component_fn(bundle, batch, pack, key):
    def fn():
        _, comps = total_loss(bundle, batch, pack)
        return comps[key]
    return fn


def module_params(module, limit=6):
    params = [p for p in module.parameters() if p.requires_grad]
    return params[:limit] + params[-limit:] if len(params) > 2 * limit else params


class TestVaeLossGradients:
    def test_vae_loss_matches_fd(self):
        torch.manual_seed(3)
        vae = VAE(VaeConfig(compression=4, widths=(4, 8))).double()
        img = torch.rand(2, 3, 16, 16, dtype=torch.float64)
        noise = torch.randn(2, 4, 4, 4, dtype=torch.float64)

        def fn():
            mean, logvar = vae.encode_moments(img)
            z = mean + torch.exp(0.5 * logvar) * noise
            recon = vae.decode(z)
            total, _, _ = vae_loss(img, recon, mean, logvar, kl_weight=1e-3)
            return total

        grad_check(fn, module_params(vae), probes_per_param=4, seed=0)


class TestStage2Gradients:
    def test_diffusion_loss_wrt_control_and_interaction(self, bundle, batch, pack):
        fn = component_fn(bundle, batch, pack, "l_diff")
        params = module_params(bundle.control) + module_params(bundle.interaction)
        grad_check(fn, params, probes_per_param=3, seed=1)

    def test_l_g_wrt_prior_and_visual_encoder(self, bundle, batch, pack):
        fn = component_fn(bundle, batch, pack, "l_g")
        params = module_params(bundle.prior) + module_params(bundle.visual_encoder)
        grad_check(fn, params, probes_per_param=3, seed=2)

    def test_l_r_wrt_predictor(self, bundle, batch, pack):
        fn = component_fn(bundle, batch, pack, "l_r")
        grad_check(fn, module_params(bundle.predictor), probes_per_param=3, seed=3)

    def test_l_gp_wrt_prior(self, bundle, batch, pack):
        fn = component_fn(bundle, batch, pack, "l_gp")
        grad_check(fn, module_params(bundle.prior), probes_per_param=3, seed=4)

    def test_l_rp_wrt_predictor(self, bundle, batch, pack):
        fn = component_fn(bundle, batch, pack, "l_rp")
        grad_check(fn, module_params(bundle.predictor), probes_per_param=3, seed=5)

    def test_total_loss_wrt_all_trainables(self, bundle, batch, pack):
        def fn():
            total, _ = total_loss(bundle, batch, pack)
            return total
        params = []
        for mod in bundle.trainable_stage2().values():
            params += module_params(mod, limit=3)
        grad_check(fn, params, probes_per_param=2, seed=6)


def test_float64_everywhere(bundle, batch, pack):
    total, comps = total_loss(bundle, batch, pack)
    assert total.dtype == torch.float64
    assert all(v.dtype == torch.float64 for v in comps.values())
