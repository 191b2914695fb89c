import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from luxlift.imaging import (
    PSNR_CEILING_DB,
    CorruptDataError,
    DegradationParams,
    MissingFileError,
    ShapeMismatchError,
    UnsupportedFormatError,
    degrade,
    depth_to_space,
    load_image,
    psnr,
    quantize_u8,
    save_image,
    space_to_depth,
    ssim,
    to_batch,
)
from conftest import random_image
from oracles import naive_ssim


class TestLoadSave:
    def test_load_2x2_png_byte_values(self, tmp_path):
        from PIL import Image as PILImage

        data = np.array(
            [[[0, 0, 0], [255, 255, 255]], [[128, 128, 128], [255, 0, 0]]], dtype=np.uint8
        )
        path = tmp_path / "tiny.png"
        PILImage.fromarray(data).save(path)
        img = load_image(path)
        assert img.shape == (2, 2, 3)
        np.testing.assert_allclose(img[0, 0], [0, 0, 0])
        np.testing.assert_allclose(img[0, 1], [1, 1, 1])
        np.testing.assert_allclose(img[1, 0], [128 / 255] * 3, atol=1e-6)
        np.testing.assert_allclose(img[1, 1], [1, 0, 0])

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_image(tmp_path / "nope.png")

    def test_unsupported_format(self, tmp_path):
        path = tmp_path / "notimage.png"
        path.write_bytes(b"definitely not a raster file")
        with pytest.raises(UnsupportedFormatError):
            load_image(path)

    def test_corrupt_data(self, tmp_path):
        good = tmp_path / "good.png"
        save_image(np.full((16, 16, 3), 0.5, dtype=np.float32), good)
        truncated = tmp_path / "bad.png"
        truncated.write_bytes(good.read_bytes()[:40])
        with pytest.raises((CorruptDataError, UnsupportedFormatError)):
            load_image(truncated)

    def test_shape_passthrough(self, tmp_path, rng):
        img = random_image(rng, 64, 64)
        path = tmp_path / "a.png"
        save_image(img, path)
        out = load_image(path)
        assert out.shape == (64, 64, 3)

    def test_roundtrip_within_8bit(self, tmp_path, rng):
        img = random_image(rng, 64, 64)
        path = tmp_path / "rt.png"
        save_image(img, path)
        out = load_image(path)
        assert np.abs(out - img).max() <= 1 / 255 + 1e-7

    @pytest.mark.parametrize("value", [0.0, 1.0])
    def test_constant_roundtrip_exact(self, tmp_path, value):
        img = np.full((8, 8, 3), value, dtype=np.float32)
        path = tmp_path / "c.png"
        save_image(img, path)
        np.testing.assert_array_equal(load_image(path), img)

    def test_unwritable_path(self, rng):
        with pytest.raises(Exception):
            save_image(random_image(rng), "/nonexistent-dir/sub/x.png")


class TestDegrade:
    def test_identity_params(self, rng):
        img = random_image(rng)
        out = degrade(img, DegradationParams(gamma=1.0, gain=1.0))
        np.testing.assert_allclose(out, img, atol=1e-6)

    def test_pure_gain(self):
        img = np.full((8, 8, 3), 0.8, dtype=np.float32)
        out = degrade(img, DegradationParams(gamma=1.0, gain=0.25))
        np.testing.assert_allclose(out, 0.2, atol=1e-6)

    def test_gamma_gain_closed_form(self):
        # 0.5 * 0.6**2 = 0.18
        img = np.full((4, 4, 3), 0.6, dtype=np.float32)
        out = degrade(img, DegradationParams(gamma=2.0, gain=0.5))
        np.testing.assert_allclose(out, 0.18, atol=1e-6)

    def test_deterministic_given_seed(self, rng):
        img = random_image(rng)
        p = DegradationParams(gamma=2.0, gain=0.3, read_noise_sigma=0.05, shot_noise_scale=0.01, seed=7)
        np.testing.assert_array_equal(degrade(img, p), degrade(img, p))

    def test_different_seeds_differ(self, rng):
        img = random_image(rng)
        a = degrade(img, DegradationParams(2.0, 0.3, 0.05, 0.01, seed=1))
        b = degrade(img, DegradationParams(2.0, 0.3, 0.05, 0.01, seed=2))
        assert np.abs(a - b).max() > 0

    def test_output_in_unit_range(self, rng):
        img = random_image(rng)
        out = degrade(img, DegradationParams(1.5, 0.9, 0.2, 0.05, seed=3))
        assert out.min() >= 0 and out.max() <= 1

    @given(gamma=st.floats(1.0, 4.0), gain=st.floats(0.05, 1.0), seed=st.integers(0, 10))
    @settings(max_examples=25, deadline=None)
    def test_noiseless_darkening_monotone(self, gamma, gain, seed):
        img = random_image(np.random.default_rng(seed))
        out = degrade(img, DegradationParams(gamma=gamma, gain=gain))
        assert (out <= img + 1e-6).all()

    def test_param_validation(self):
        with pytest.raises(ValueError):
            DegradationParams(gamma=0.0, gain=0.5)
        with pytest.raises(ValueError):
            DegradationParams(gamma=1.0, gain=1.5)
        with pytest.raises(ValueError):
            DegradationParams(gamma=1.0, gain=0.5, read_noise_sigma=0.5)
        with pytest.raises(ValueError):
            DegradationParams(gamma=1.0, gain=0.5, shot_noise_scale=-1)


class TestSpaceToDepth:
    def test_shape_rule(self, rng):
        img = rng.uniform(size=(4, 4, 3)).astype(np.float32)
        out = space_to_depth(img, 2)
        assert out.shape == (2, 2, 12)

    def test_paper_channel_count_s8(self, rng):
        img = rng.uniform(size=(64, 64, 3)).astype(np.float32)
        assert space_to_depth(img, 8).shape == (8, 8, 192)

    def test_depth_to_space_shape(self, rng):
        t = rng.uniform(size=(1, 1, 12)).astype(np.float32)
        assert depth_to_space(t, 2).shape == (2, 2, 3)

    def test_constant_passthrough(self):
        t = np.full((3, 5, 12), 0.37, dtype=np.float32)
        np.testing.assert_array_equal(depth_to_space(t, 2), np.full((6, 10, 3), 0.37, dtype=np.float32))

    @pytest.mark.parametrize("s", [1, 2, 3, 4])
    @pytest.mark.parametrize("hw", [(4, 8), (8, 4), (12, 12)])
    def test_bijection_exhaustive_small(self, s, hw, rng):
        h, w = hw
        if h % s or w % s:
            pytest.skip("not divisible")
        img = rng.uniform(size=(h, w, 3)).astype(np.float32)
        np.testing.assert_array_equal(depth_to_space(space_to_depth(img, s), s), img)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 100))
    @settings(max_examples=25, deadline=None)
    def test_bijection_property(self, hs, ws, seed):
        s = 2
        r = np.random.default_rng(seed)
        img = r.uniform(size=(hs * s, ws * s, 3)).astype(np.float32)
        np.testing.assert_array_equal(depth_to_space(space_to_depth(img, s), s), img)
        t = r.uniform(size=(hs, ws, 3 * s * s)).astype(np.float32)
        np.testing.assert_array_equal(space_to_depth(depth_to_space(t, s), s), t)

    def test_no_values_created_or_lost(self, rng):
        img = rng.uniform(size=(8, 8, 3)).astype(np.float32)
        out = space_to_depth(img, 4)
        np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(img.ravel()))

    def test_matches_torch_pixel_unshuffle(self, rng):
        img = rng.uniform(size=(2, 16, 16, 3)).astype(np.float32)
        ours = to_batch(np.stack([space_to_depth(im, 4) for im in img]))
        theirs = F.pixel_unshuffle(to_batch(img), 4)
        assert torch.equal(ours, theirs)

    def test_errors(self, rng):
        with pytest.raises(ShapeMismatchError):
            space_to_depth(rng.uniform(size=(5, 4, 3)).astype(np.float32), 2)
        with pytest.raises(ShapeMismatchError):
            depth_to_space(rng.uniform(size=(2, 2, 10)).astype(np.float32), 2)


class TestPsnr:
    def test_identical_hits_ceiling(self, rng):
        img = random_image(rng)
        assert psnr(img, img) == PSNR_CEILING_DB

    def test_mse_closed_form_20db(self):
        a = np.zeros((10, 10, 3), dtype=np.float32)
        b = np.full((10, 10, 3), 0.1, dtype=np.float32)  # MSE = 0.01
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-5)

    def test_zero_vs_one_is_0db(self):
        a = np.zeros((10, 10, 3), dtype=np.float32)
        b = np.ones((10, 10, 3), dtype=np.float32)
        assert psnr(a, b) == pytest.approx(0.0, abs=1e-9)

    def test_symmetric(self, rng):
        a, b = random_image(rng), random_image(rng)
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatchError):
            psnr(random_image(rng, 8, 8), random_image(rng, 8, 9))

    def test_decreases_with_noise_sigma(self):
        r = np.random.default_rng(0)
        base = random_image(r, 32, 32)
        sigmas = [0.01, 0.03, 0.1]
        means = []
        for sigma in sigmas:
            vals = []
            for _ in range(100):
                noisy = np.clip(base + sigma * r.standard_normal(base.shape), 0, 1).astype(np.float32)
                vals.append(psnr(base, noisy))
            means.append(np.mean(vals))
        assert means[0] > means[1] > means[2]


class TestSsim:
    def test_identical_is_one(self, rng):
        img = random_image(rng)
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_constant_zero_vs_one_closed_form(self):
        # windows are constant, so SSIM = C1 / (1 + C1) from the constants alone
        a = np.zeros((16, 16, 3), dtype=np.float32)
        b = np.ones((16, 16, 3), dtype=np.float32)
        expected = 1e-4 / (1 + 1e-4)
        assert ssim(a, b) == pytest.approx(expected, rel=1e-9)
        assert naive_ssim(a, b) == pytest.approx(expected, rel=1e-9)

    def test_matches_naive_reference(self, rng):
        a = random_image(rng, 12, 14)
        b = random_image(rng, 12, 14)
        assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-10)

    def test_tiny_noise_above_099(self):
        r = np.random.default_rng(5)
        a = random_image(r, 16, 16)
        b = np.clip(a + 1e-4 * r.standard_normal(a.shape), 0, 1).astype(np.float32)
        assert ssim(a, b) > 0.99
        assert naive_ssim(a, b) > 0.99

    def test_symmetric(self, rng):
        a, b = random_image(rng), random_image(rng)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)

    def test_too_small_image(self, rng):
        with pytest.raises(ShapeMismatchError):
            ssim(random_image(rng, 4, 4), random_image(rng, 4, 4))

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatchError):
            ssim(random_image(rng, 16, 16), random_image(rng, 16, 17))


def test_quantize_u8_idempotent(rng):
    img = random_image(rng)
    q = quantize_u8(img)
    np.testing.assert_array_equal(quantize_u8(q), q)
    assert np.abs(q - img).max() <= 0.5 / 255 + 1e-7
