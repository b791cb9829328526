"""Raster container, file I/O round trips, Gaussian blur, log/exp maps."""

import numpy as np
import pytest

from retispec.raster import (
    GaussianSpec,
    Raster,
    RasterIOError,
    exp_map,
    gaussian_blur,
    load_raster,
    log_map,
    mirror_indices,
    save_raster,
)


def test_raster_properties():
    r = Raster(np.zeros((4, 6, 3)))
    assert (r.height, r.width, r.channels) == (4, 6, 3)
    assert r.shape == (4, 6, 3)


def test_raster_promotes_grayscale():
    r = Raster(np.zeros((4, 6)))
    assert r.channels == 1


def test_raster_constant():
    r = Raster.constant(2, 3, 1, value=0.25)
    assert np.all(r.pixels == 0.25)


def test_raster_rejects_nan():
    with pytest.raises(ValueError):
        Raster(np.full((2, 2, 1), np.nan))


def test_gaussian_spec_kernel_sums_to_one():
    spec = GaussianSpec(2.5)
    k = spec.kernel()
    assert k.size == 2 * spec.radius + 1
    assert abs(k.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(k, k[::-1])  # symmetric


def test_gaussian_spec_rejects_nonpositive():
    with pytest.raises(ValueError):
        GaussianSpec(0.0)


def test_blur_preserves_constant():
    img = Raster.constant(16, 16, 3, value=0.7)
    out = gaussian_blur(img, 3.0)
    np.testing.assert_allclose(out.pixels, 0.7, atol=1e-12)


def test_blur_preserves_mean_under_mirror_boundary():
    rng = np.random.default_rng(0)
    img = Raster(rng.random((32, 32, 1)))
    out = gaussian_blur(img, 2.0)
    # mirror boundary conserves total mass only approximately, but a blur
    # must never move the mean by more than the boundary band can carry
    assert abs(out.pixels.mean() - img.pixels.mean()) < 0.02


def test_blur_matches_dense_convolution():
    """Separable path equals an explicit dense 2-D convolution oracle."""
    rng = np.random.default_rng(1)
    img = rng.random((20, 20))
    spec = GaussianSpec(1.5)
    k = spec.kernel()
    pad = spec.radius
    rows = mirror_indices(20, pad)
    ext = img[np.ix_(rows, rows)]
    dense = np.zeros((20, 20))
    k2 = np.outer(k, k)
    for i in range(20):
        for j in range(20):
            dense[i, j] = np.sum(ext[i : i + k.size, j : j + k.size] * k2)
    out = gaussian_blur(Raster(img), spec)
    np.testing.assert_allclose(out.pixels[:, :, 0], dense, atol=1e-10)


def test_blur_large_sigma_fft_path_matches_direct():
    """FFT path (kernel > 64 taps) agrees with convolve1d on the same kernel."""
    from scipy.ndimage import convolve1d

    rng = np.random.default_rng(2)
    img = rng.random((48, 48, 1))
    spec = GaussianSpec(15.0)  # radius 45 -> 91 taps, FFT path
    k = spec.kernel()
    ref = convolve1d(img, k, axis=1, mode="mirror")
    ref = convolve1d(ref, k, axis=0, mode="mirror")
    out = gaussian_blur(Raster(img), spec)
    np.testing.assert_allclose(out.pixels, ref, atol=1e-12)


def test_mirror_indices_no_edge_repeat():
    np.testing.assert_array_equal(mirror_indices(4, 2), [2, 1, 0, 1, 2, 3, 2, 1])
    np.testing.assert_array_equal(mirror_indices(1, 2), [0, 0, 0, 0, 0])


def test_log_exp_roundtrip():
    rng = np.random.default_rng(3)
    img = Raster(rng.uniform(0.01, 1.0, (8, 8, 3)))
    back = exp_map(log_map(img, epsilon=1e-6))
    np.testing.assert_allclose(back.pixels, img.pixels, rtol=1e-12)


def test_log_map_clamps_at_epsilon():
    img = Raster(np.zeros((2, 2, 1)))
    out = log_map(img, epsilon=1e-4)
    np.testing.assert_allclose(out.pixels, np.log(1e-4))


def test_ppm_roundtrip_is_exact(tmp_path):
    # quantized values survive a save/load cycle bit-for-bit
    rng = np.random.default_rng(4)
    img = Raster(np.floor(rng.random((6, 5, 3)) * 255.0) / 255.0)
    p = tmp_path / "img.ppm"
    save_raster(img, p)
    back = load_raster(p)
    np.testing.assert_allclose(back.pixels, img.pixels, atol=1e-12)


def test_png_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(5)
    img = Raster(np.floor(rng.random((6, 5, 1)) * 255.0) / 255.0)
    p = tmp_path / "img.png"
    save_raster(img, p)
    back = load_raster(p)
    np.testing.assert_allclose(back.pixels, img.pixels, atol=1e-12)


def test_save_is_byte_deterministic(tmp_path):
    rng = np.random.default_rng(6)
    img = Raster(rng.random((12, 9, 3)))
    a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
    save_raster(img, a, clamp=True)
    save_raster(img, b, clamp=True)
    assert a.read_bytes() == b.read_bytes()


def test_save_rejects_out_of_range_without_clamp(tmp_path):
    img = Raster(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError, match="clamp"):
        save_raster(img, tmp_path / "x.ppm")
    save_raster(img, tmp_path / "x.ppm", clamp=True)  # with clamp it works
    assert np.all(load_raster(tmp_path / "x.ppm").pixels == 1.0)


def test_load_missing_file_raises_io_error(tmp_path):
    with pytest.raises(RasterIOError):
        load_raster(tmp_path / "nope.ppm")


def test_load_malformed_ppm(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P3\n2 2\n255\n")
    with pytest.raises(RasterIOError, match="malformed"):
        load_raster(p)


def test_load_truncated_ppm(tmp_path):
    p = tmp_path / "short.ppm"
    p.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)
    with pytest.raises(RasterIOError, match="truncated"):
        load_raster(p)


def test_ppm_comment_in_header(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# a comment\n1 1\n255\n\x10\x20\x30")
    img = load_raster(p)
    np.testing.assert_allclose(
        img.pixels[0, 0], np.array([0x10, 0x20, 0x30]) / 255.0
    )


def test_format_inference():
    with pytest.raises(ValueError, match="infer"):
        load_raster("file.jpeg")


def test_ppm_requires_three_channels(tmp_path):
    img = Raster(np.zeros((2, 2, 1)))
    with pytest.raises(ValueError, match="3 channels"):
        save_raster(img, tmp_path / "x.ppm")
