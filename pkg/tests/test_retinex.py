"""Retinex log-albedo extraction and texture normalization."""

import numpy as np
import pytest

from retispec.raster import GaussianSpec, Raster, gaussian_blur, log_map
from retispec.retinex import (
    DEFAULT_SIGMAS,
    TEXTURE_FLOOR,
    RetinexConfig,
    multi_scale_retinex,
    normalize_texture,
    single_scale_retinex,
)


def test_default_sigmas():
    assert DEFAULT_SIGMAS == (15.0, 80.0, 120.0)
    assert RetinexConfig().sigmas == DEFAULT_SIGMAS


@pytest.mark.parametrize(
    "sigmas", [(), (0.0, 5.0), (-1.0,), (5.0, 5.0), (10.0, 5.0)]
)
def test_config_rejects_bad_sigmas(sigmas):
    with pytest.raises(ValueError):
        RetinexConfig(sigmas=sigmas)


def test_config_rejects_unknown_normalization():
    with pytest.raises(ValueError, match="normalization"):
        RetinexConfig(normalization="tanh")


def test_ssr_constant_image_is_zero():
    img = Raster.constant(16, 16, 3, value=0.4)
    out = single_scale_retinex(img, 3.0)
    np.testing.assert_allclose(out.pixels, 0.0, atol=1e-12)


def test_ssr_matches_direct_formula():
    """SSR equals log(image) - log(blur(image)) computed by hand."""
    rng = np.random.default_rng(0)
    img = Raster(rng.uniform(0.05, 1.0, (24, 24, 3)))
    sigma, eps = 2.0, 1e-4
    ref = (
        log_map(img, eps).pixels
        - log_map(gaussian_blur(img, GaussianSpec(sigma)), eps).pixels
    )
    out = single_scale_retinex(img, sigma, eps)
    np.testing.assert_allclose(out.pixels, ref, atol=1e-14)


def test_ssr_separates_ramp_from_checkerboard():
    """Smooth illumination ramp times checkerboard albedo: the Retinex
    output should correlate strongly with the log albedo."""
    n = 64
    yy, xx = np.mgrid[0:n, 0:n]
    illum = 0.3 + 0.6 * (xx + yy) / (2.0 * (n - 1.0))
    checker = np.where((xx // 8 + yy // 8) % 2 == 0, 0.9, 0.45)
    img = Raster((illum * checker)[:, :, None])
    out = single_scale_retinex(img, 15.0)
    r = np.corrcoef(out.pixels.ravel(), np.log(checker).ravel())[0, 1]
    assert r > 0.95


def test_msr_single_scale_equals_ssr():
    rng = np.random.default_rng(1)
    img = Raster(rng.uniform(0.05, 1.0, (16, 16, 1)))
    cfg = RetinexConfig(sigmas=(4.0,))
    tex = multi_scale_retinex(img, cfg)
    ssr = single_scale_retinex(img, 4.0, cfg.epsilon)
    np.testing.assert_allclose(tex.log_albedo.pixels, ssr.pixels, atol=1e-14)


def test_msr_is_mean_of_scales():
    rng = np.random.default_rng(2)
    img = Raster(rng.uniform(0.05, 1.0, (16, 16, 1)))
    cfg = RetinexConfig(sigmas=(2.0, 4.0, 8.0))
    tex = multi_scale_retinex(img, cfg)
    ref = np.mean(
        [single_scale_retinex(img, s, cfg.epsilon).pixels for s in cfg.sigmas],
        axis=0,
    )
    np.testing.assert_allclose(tex.log_albedo.pixels, ref, atol=1e-14)


def test_msr_constant_image():
    img = Raster.constant(16, 16, 3, value=0.6)
    tex = multi_scale_retinex(img, RetinexConfig(sigmas=(2.0, 5.0)))
    np.testing.assert_allclose(tex.log_albedo.pixels, 0.0, atol=1e-12)
    np.testing.assert_allclose(tex.albedo.pixels, 1.0)  # constant maps to 1


def test_msr_invariant_to_global_illumination_scale():
    """MSR(k * I) == MSR(I) exactly, away from the epsilon clamp."""
    rng = np.random.default_rng(3)
    img = Raster(rng.uniform(0.2, 0.5, (24, 24, 3)))
    cfg = RetinexConfig(sigmas=(3.0, 9.0))
    a = multi_scale_retinex(img, cfg).log_albedo.pixels
    b = multi_scale_retinex(Raster(1.7 * img.pixels), cfg).log_albedo.pixels
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_msr_mirror_equivariance():
    rng = np.random.default_rng(4)
    img = Raster(rng.uniform(0.05, 1.0, (20, 24, 3)))
    cfg = RetinexConfig(sigmas=(2.0, 6.0))
    direct = multi_scale_retinex(Raster(img.pixels[:, ::-1]), cfg)
    mirrored = multi_scale_retinex(img, cfg).log_albedo.pixels[:, ::-1]
    np.testing.assert_allclose(direct.log_albedo.pixels, mirrored, atol=1e-12)


def test_msr_recovers_log_albedo_on_synthetic_scene():
    """Default scales on a smooth-light x rough-albedo product scene: the
    mean-removed log-albedo estimate should be close to the truth."""
    n = 192
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1.0)
    light = 0.6 + 0.2 * np.sin(np.pi * xx) * np.cos(0.5 * np.pi * yy)
    alb = np.exp(
        0.25
        * np.sign(np.sin(xx * 40.0) * np.cos(yy * 34.0))
    ) * 0.5
    img = Raster((light * alb)[:, :, None])
    tex = multi_scale_retinex(img)
    est = tex.log_albedo.pixels[:, :, 0]
    truth = np.log(alb)
    est = est - est.mean()
    truth = truth - truth.mean()
    rms = np.sqrt(np.mean((est - truth) ** 2))
    assert rms < 0.1


def test_normalize_constant_maps_to_one():
    out = normalize_texture(Raster(np.zeros((4, 4, 3))))
    np.testing.assert_allclose(out.pixels, 1.0)


def test_normalize_endpoints():
    log_a = Raster(np.array([[np.log(0.25)], [np.log(1.0)]])[:, :, None])
    out = normalize_texture(log_a)
    np.testing.assert_allclose(out.pixels[0, 0, 0], TEXTURE_FLOOR)
    np.testing.assert_allclose(out.pixels[1, 0, 0], 1.0)


def test_normalize_range_and_monotonicity():
    rng = np.random.default_rng(6)
    log_a = Raster(rng.normal(size=(16, 16, 3)))
    out = normalize_texture(log_a)
    assert out.pixels.min() >= TEXTURE_FLOOR
    assert out.pixels.max() <= 1.0
    # order of any two pixels within a channel is preserved
    flat_in = log_a.pixels[:, :, 0].ravel()
    flat_out = out.pixels[:, :, 0].ravel()
    idx = np.argsort(flat_in)
    assert np.all(np.diff(flat_out[idx]) >= 0)


def test_normalize_none_rule_is_plain_exp():
    rng = np.random.default_rng(7)
    log_a = Raster(rng.normal(size=(4, 4, 1)))
    out = normalize_texture(log_a, rule="none")
    np.testing.assert_allclose(out.pixels, np.exp(log_a.pixels))


def test_texture_map_albedo_matches_rule():
    rng = np.random.default_rng(8)
    img = Raster(rng.uniform(0.05, 1.0, (16, 16, 1)))
    tex = multi_scale_retinex(img, RetinexConfig(sigmas=(3.0,)))
    ref = normalize_texture(tex.log_albedo, "exp-minmax")
    np.testing.assert_allclose(tex.albedo.pixels, ref.pixels)
