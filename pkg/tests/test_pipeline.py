"""Full decomposition pipeline: stage wiring, the reconstruction identity,
specular extraction, and the export/import bundle."""

import json

import numpy as np
import pytest

from retispec.geometry import Camera, GeometryError, make_sphere, rasterize
from retispec.pipeline import (
    EPSILON_DIV,
    EXPORT_RANGES,
    Decomposition,
    DecompositionError,
    decompose,
    export_decomposition,
    extract_specular,
    load_exported_maps,
    reconstruction_error,
)
from retispec.raster import Raster
from retispec.shading import render_buffers


def test_decompose_accepts_mesh_or_buffers(face_scene):
    d_mesh = decompose(face_scene["image"], face_scene["mesh"],
                       camera=Camera(), uv_resolution=32)
    d_buf = decompose(face_scene["image"], face_scene["buffers"],
                      uv_resolution=32)
    np.testing.assert_array_equal(d_mesh.specular_map.pixels,
                                  d_buf.specular_map.pixels)


def test_decompose_rejects_other_geometry(face_scene):
    with pytest.raises(DecompositionError) as exc:
        decompose(face_scene["image"], "not a mesh")
    assert exc.value.stage == "geometry"


def test_decompose_rejects_mismatched_buffers(face_scene):
    buffers = rasterize(make_sphere(n_lat=8, n_lon=16), Camera(), 16, 16)
    with pytest.raises(DecompositionError) as exc:
        decompose(face_scene["image"], buffers)
    assert exc.value.stage == "geometry"


def test_decompose_rejects_unknown_texture_source(face_scene):
    with pytest.raises(DecompositionError):
        decompose(face_scene["image"], face_scene["buffers"],
                  texture_source="oracle")


def test_decompose_provided_albedo_validation(face_scene):
    with pytest.raises(DecompositionError) as exc:
        decompose(face_scene["image"], face_scene["buffers"],
                  texture_source="provided")
    assert exc.value.stage == "texture"
    bad = Raster(np.zeros_like(face_scene["image"].pixels))
    with pytest.raises(DecompositionError, match="positive"):
        decompose(face_scene["image"], face_scene["buffers"],
                  texture_source="provided", provided_albedo=bad)


def test_reconstruction_identity(face_scene):
    """(ambient + direct + specular) * T reproduces the image exactly under
    the mask; the identity holds by construction of the residual."""
    for source, albedo in (("msr", None), ("provided", face_scene["albedo_image"])):
        d = decompose(face_scene["image"], face_scene["buffers"],
                      texture_source=source, provided_albedo=albedo,
                      uv_resolution=32)
        err = reconstruction_error(d, face_scene["image"])
        assert err <= 1e-10


def test_decompose_meta_contents(face_scene):
    d = decompose(face_scene["image"], face_scene["buffers"], uv_resolution=32)
    meta = d.meta
    assert meta["texture_source"] == "msr"
    assert meta["retinex"]["sigmas"] == [15.0, 80.0, 120.0]
    assert set(meta["timings"]) == {"geometry", "texture", "fit", "split",
                                    "specular", "flatten"}
    assert 0.0 <= meta["direct_negative_fraction"] <= 1.0


def test_decompose_ambient_constant_under_mask(face_scene):
    d = decompose(face_scene["image"], face_scene["buffers"], uv_resolution=32)
    vals = d.ambient_map.pixels[d.mask]
    assert np.ptp(vals, axis=0).max() == 0.0


def test_extract_specular_recovers_planted_residual(face_scene):
    """Render diffuse-only, fit, then add a known residual on top: the
    extractor must return it (in illumination units) exactly."""
    buffers = face_scene["buffers"]
    params = face_scene["params"]
    diffuse = render_buffers(buffers, params.replace(exponent=64.0),
                             uv_texture=face_scene["albedo"],
                             components=("ambient", "diffuse"))
    d = decompose(diffuse, buffers, texture_source="provided",
                  provided_albedo=face_scene["albedo_image"],
                  robust=False, uv_resolution=32)
    planted = np.zeros_like(diffuse.pixels)
    planted[buffers.mask] = 0.05
    tex = face_scene["albedo_image"].pixels
    with_spec = Raster(diffuse.pixels + planted * tex)
    spr = extract_specular(with_spec, d.texture.albedo, d.coeffs, buffers)
    base = extract_specular(diffuse, d.texture.albedo, d.coeffs, buffers)
    got = spr.pixels[buffers.mask] - base.pixels[buffers.mask]
    # division clamps at epsilon_div; the fixture albedo stays above it
    np.testing.assert_allclose(got, 0.05, atol=1e-9)


def test_extract_specular_zero_outside_mask(face_scene):
    d = decompose(face_scene["image"], face_scene["buffers"], uv_resolution=32)
    assert np.all(d.specular_map.pixels[~d.mask] == 0.0)


def test_extract_specular_empty_mask_raises(face_scene):
    from retispec.geometry import GeometryBuffers

    empty = GeometryBuffers(
        normal_map=np.zeros((4, 4, 3)), mask=np.zeros((4, 4), dtype=bool),
        uv_map=np.zeros((4, 4, 2)), depth=np.zeros((4, 4)),
    )
    d = decompose(face_scene["image"], face_scene["buffers"], uv_resolution=32)
    with pytest.raises(ValueError, match="empty"):
        extract_specular(face_scene["image"], d.texture.albedo, d.coeffs, empty)


def test_decompose_is_deterministic(face_scene):
    a = decompose(face_scene["image"], face_scene["buffers"], uv_resolution=32)
    b = decompose(face_scene["image"], face_scene["buffers"], uv_resolution=32)
    np.testing.assert_array_equal(a.specular_map.pixels, b.specular_map.pixels)
    np.testing.assert_array_equal(a.coeffs.gamma, b.coeffs.gamma)
    np.testing.assert_array_equal(a.uv_texture.pixels, b.uv_texture.pixels)


def test_export_bundle_files_and_inversion(face_scene, tmp_path):
    d = decompose(face_scene["image"], face_scene["buffers"], uv_resolution=32)
    out = tmp_path / "bundle"
    export_decomposition(d, out)
    expected = {f"{n}.png" for n in EXPORT_RANGES} | {"coeffs.json", "meta.json"}
    assert {p.name for p in out.iterdir()} == expected

    maps, meta = load_exported_maps(out)
    # 8-bit quantization of the recorded affine range bounds the error
    lo, hi = EXPORT_RANGES["uv_specular"]
    step = (hi - lo) / 255.0
    clipped = np.clip(d.uv_specular.pixels, lo, hi)
    assert np.abs(maps["uv_specular"].pixels - clipped).max() <= 0.5 * step + 1e-12
    assert meta["texture_source"] == "msr"
    assert "timings" not in meta


def test_export_is_byte_deterministic(face_scene, tmp_path):
    d = decompose(face_scene["image"], face_scene["buffers"], uv_resolution=32)
    a, b = tmp_path / "a", tmp_path / "b"
    export_decomposition(d, a)
    export_decomposition(d, b)
    for p in sorted(a.iterdir()):
        assert p.read_bytes() == (b / p.name).read_bytes(), p.name


def test_export_coeffs_json_roundtrip(face_scene, tmp_path):
    d = decompose(face_scene["image"], face_scene["buffers"], uv_resolution=32)
    out = tmp_path / "bundle"
    export_decomposition(d, out)
    with open(out / "coeffs.json") as fh:
        gamma = np.asarray(json.load(fh)["gamma"])
    np.testing.assert_allclose(gamma, d.coeffs.gamma)
