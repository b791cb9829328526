"""Shared fixtures: reference scenes with known ground truth.

The heavy fixtures are session-scoped.  Everything here is seeded, so two
test runs see bit-identical scenes.
"""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from retispec.geometry import Camera, make_ellipsoid, make_synthetic_face, rasterize
from retispec.raster import Raster
from retispec.shading import PhongParams, render_buffers, sample_uv_texture


def band_albedo(res, seed, amp=0.35, s_lo=0.7, s_hi=2.0, anchor_uvs=None,
                depth=5.0, dot=2):
    """Band-passed log-normal albedo plus optional near-black anchor dots.

    The difference-of-Gaussians band keeps all albedo structure away from
    the scales a Retinex pass treats as illumination.  The anchor dots pin
    the dark end of the exp-minmax texture normalization so it reduces to
    a plain rescale on scenes whose own dynamic range is too narrow.
    """
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((res, res, 3))
    g = gaussian_filter(w, (s_lo, s_lo, 0)) - gaussian_filter(w, (s_hi, s_hi, 0))
    g /= g.std()
    a = 0.5 * np.exp(amp * g)
    if anchor_uvs is not None:
        for (u, v) in anchor_uvs:
            r0 = int((1 - v) * (res - 1))
            c0 = int(u * (res - 1))
            a[max(r0 - dot, 0):r0 + dot + 1,
              max(c0 - dot, 0):c0 + dot + 1, :] *= np.exp(-depth)
    return Raster(np.clip(a, 0.002, 0.98))


class ProlateScene:
    """Front-lit prolate ellipsoid with a known band-passed albedo.

    The long z-axis spreads the image-plane footprint of every normal
    direction, so a frontal Phong lobe stays compact enough for the
    trimmed illumination fit to isolate.  Ground truth (per exponent):
    the rendered image, the specular-only render, and the specular term
    expressed in illumination units (divided by the albedo).
    """

    def __init__(self, seed=7, size=256):
        self.mesh = make_ellipsoid((1.5, 1.5, 4.95), n_lat=96, n_lon=192)
        self.buffers = rasterize(self.mesh, Camera(), size, size)
        self.mask = self.buffers.mask
        rng = np.random.default_rng(seed + 1)
        mask_idx = np.argwhere(self.mask)
        pick = mask_idx[rng.integers(len(mask_idx), size=40)]
        anchor_uvs = [tuple(self.buffers.uv_map[i, j]) for i, j in pick]
        self.albedo = band_albedo(1024, seed, anchor_uvs=anchor_uvs)
        self.tex_px = sample_uv_texture(self.albedo, self.buffers.uv_map[self.mask])
        tex_img = np.ones(self.mask.shape + (3,))
        tex_img[self.mask] = self.tex_px
        self.albedo_image = Raster(tex_img)

    def params(self, exponent):
        return PhongParams(light_dir=(0.0, 0.0, 1.0), view_dir=(0.0, 0.0, 1.0),
                           ambient=0.3, direct=0.4, exponent=exponent)

    def render(self, exponent):
        return render_buffers(self.buffers, self.params(exponent),
                              uv_texture=self.albedo)

    def specular_ground_truth(self, exponent):
        spec = render_buffers(self.buffers, self.params(exponent),
                              uv_texture=self.albedo, components=("specular",))
        return spec.pixels[self.mask], spec.pixels[self.mask] / self.tex_px


@pytest.fixture(scope="session")
def prolate_scene():
    return ProlateScene()


@pytest.fixture(scope="session")
def face_scene():
    """Small lit face render with everything needed to test decompose()."""
    mesh = make_synthetic_face(radii=(0.85, 1.0, 0.4), nose_amplitude=0.1,
                               resolution=24, seed=3)
    buffers = rasterize(mesh, Camera(), 64, 64)
    params = PhongParams(light_dir=(0.3, 0.1, 0.9486832980505138),
                         view_dir=(0.0, 0.0, 1.0),
                         ambient=0.12, direct=0.4, exponent=32.0)
    rng = np.random.default_rng(11)
    albedo = Raster(np.clip(
        0.55 + 0.18 * rng.standard_normal((48, 48, 3)), 0.25, 0.95))
    image = render_buffers(buffers, params, uv_texture=albedo)
    tex_img = np.ones(buffers.mask.shape + (3,))
    tex_img[buffers.mask] = sample_uv_texture(
        albedo, buffers.uv_map[buffers.mask])
    return {"mesh": mesh, "buffers": buffers, "params": params,
            "albedo": albedo, "image": image, "albedo_image": Raster(tex_img)}


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A 10 real + 10 fake corpus at reduced resolution, shared by bench
    and CLI tests.  Small sizes keep generation fast; the acceptance tests
    build a full-size corpus separately."""
    from retispec.bench import GenerationSettings, generate_dataset

    root = tmp_path_factory.mktemp("tiny_corpus")
    settings = GenerationSettings(image_size=64, uv_resolution=32,
                                  face_resolution=16)
    manifests = generate_dataset(root, 10, 10, seed=5, settings=settings)
    return {"root": root, "manifest": root / "manifest.json",
            "samples": manifests}
