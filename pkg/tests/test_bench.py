"""Benchmark corpus generation, physics-residual scoring, AUC/ROC,
perturbations, and the evaluation loop."""

import dataclasses
import json

import numpy as np
import pytest

from retispec.bench import (
    DEFAULT_MODE_WEIGHTS,
    FAKE_MODES,
    GenerationSettings,
    apply_perturbation,
    compute_auc,
    evaluate,
    generate_dataset,
    jpeg_like,
    load_manifest,
    make_procedural_albedo,
    physics_residual_score,
    roc_points,
    run_speed_benchmark,
    scene_buffers,
    scene_image_albedo,
    scene_phong_params,
)
from retispec.pipeline import decompose
from retispec.raster import Raster, load_raster
from retispec.shading import render_buffers


# ---------------------------------------------------------------------------
# Albedo and corpus generation
# ---------------------------------------------------------------------------

def test_procedural_albedo_range_and_determinism():
    a = make_procedural_albedo(32, seed=7)
    b = make_procedural_albedo(32, seed=7)
    c = make_procedural_albedo(32, seed=8)
    assert a.shape == (32, 32, 3)
    assert a.pixels.min() >= 0.35
    assert a.pixels.max() <= 0.95
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, c.pixels)


def test_generate_dataset_validation(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(tmp_path, 0, 1, seed=0)
    with pytest.raises(ValueError, match="unknown fake modes"):
        generate_dataset(tmp_path, 1, 1, seed=0,
                         mode_weights={"wrong_exponent": 1.0, "splice": 1.0})
    with pytest.raises(ValueError, match="positive entry"):
        generate_dataset(tmp_path, 1, 1, seed=0,
                         mode_weights={"wrong_exponent": 0.0})


def test_generate_dataset_reruns_byte_identical(tmp_path):
    """Same seed, same bytes: manifest, images, params, and bundles."""
    settings = GenerationSettings(image_size=48, uv_resolution=16,
                                  face_resolution=12)
    a, b = tmp_path / "a", tmp_path / "b"
    generate_dataset(a, 2, 2, seed=3, settings=settings)
    generate_dataset(b, 2, 2, seed=3, settings=settings)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), str(rel)


def test_manifest_contents(tiny_corpus):
    samples, root, payload = load_manifest(tiny_corpus["manifest"])
    assert len(samples) == 20
    reals = [s for s in samples if s.label == "real"]
    fakes = [s for s in samples if s.label == "fake"]
    assert len(reals) == len(fakes) == 10
    for s in reals:
        assert s.fake_mode == "none"
        assert s.pair_id == s.id
    for s in fakes:
        assert s.fake_mode in FAKE_MODES
        assert s.pair_id in {r.id for r in reals}
        assert (root / s.image).exists()
        assert (root / s.bundle / "meta.json").exists()
        assert (root / s.params).exists()
    assert payload["mode_weights"] == DEFAULT_MODE_WEIGHTS


def test_fake_twins_share_scene_and_base_layers(tiny_corpus):
    """A fake reuses its twin's scene: everything except the specular term
    is rendered from identical parameters."""
    samples, root, _ = load_manifest(tiny_corpus["manifest"])
    by_id = {s.id: s for s in samples}
    fake = next(s for s in samples if s.label == "fake")
    twin = by_id[fake.pair_id]
    ignore = {"fake_mode", "fake_params"}
    assert {k: v for k, v in fake.scene.items() if k not in ignore} == twin.scene
    from retispec.bench import scene_albedo

    buffers = scene_buffers(twin.scene)
    base_twin = render_buffers(buffers, scene_phong_params(twin.scene),
                               uv_texture=scene_albedo(twin.scene),
                               components=("ambient", "diffuse"))
    base_fake = render_buffers(scene_buffers(fake.scene),
                               scene_phong_params(fake.scene),
                               uv_texture=scene_albedo(fake.scene),
                               components=("ambient", "diffuse"))
    np.testing.assert_array_equal(base_twin.pixels, base_fake.pixels)


def test_fake_mode_parameters_respect_bounds(tiny_corpus):
    """Mode parameters recorded in params.json stay inside the contract:
    exponent off by at least x2, light rotated at least 20 degrees, scale
    factor well away from 1, transplant from a different scene."""
    samples, root, _ = load_manifest(tiny_corpus["manifest"])
    for s in samples:
        if s.label != "fake":
            continue
        with open(root / s.params) as fh:
            scene = json.load(fh)
        fp = scene["fake_params"]
        if s.fake_mode == "wrong_exponent":
            r = fp["ratio"]
            assert r >= 2.0 or r <= 0.5
        elif s.fake_mode == "wrong_specular_light":
            assert fp["angle_deg"] >= 20.0
            cos = np.dot(fp["specular_light"], scene["light_dir"])
            assert cos <= np.cos(np.deg2rad(20.0)) + 1e-9
        elif s.fake_mode == "scaled_specular":
            assert 0.3 <= fp["k"] <= 0.7 or 1.5 <= fp["k"] <= 2.5
        elif s.fake_mode == "transplanted_specular":
            assert isinstance(fp["donor_index"], int)


# ---------------------------------------------------------------------------
# Physics-residual score
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def clean_decomp(tiny_corpus):
    samples, root, payload = load_manifest(tiny_corpus["manifest"])
    real = next(s for s in samples if s.label == "real")
    buffers = scene_buffers(real.scene)
    image = load_raster(root / real.image)
    return decompose(
        image, buffers, texture_source="provided",
        provided_albedo=scene_image_albedo(real.scene, buffers),
        robust=True,
        trim_fraction=payload["settings"]["trim_fraction"],
        uv_resolution=real.scene["uv_resolution"])


def test_score_clean_scene_is_low(clean_decomp):
    assert physics_residual_score(clean_decomp) <= 0.35


def test_score_zero_layer_is_zero(clean_decomp):
    zeroed = dataclasses.replace(
        clean_decomp,
        specular_map=Raster(np.zeros_like(clean_decomp.specular_map.pixels)))
    assert physics_residual_score(zeroed) == 0.0


def test_score_invariant_to_global_scaling(clean_decomp):
    """The fitted gain rescales with the layer, so the normalized residual
    cannot move: scaled_specular fakes are invisible by construction."""
    base = physics_residual_score(clean_decomp)
    for k in (0.3, 2.5, 10.0):
        scaled = dataclasses.replace(
            clean_decomp,
            specular_map=Raster(k * clean_decomp.specular_map.pixels))
        np.testing.assert_allclose(physics_residual_score(scaled), base,
                                   atol=1e-9)


def test_score_random_layer_is_high(clean_decomp):
    """Zero-mean noise has no lobe structure: the best fit keeps almost
    none of it and the normalized residual approaches 1."""
    rng = np.random.default_rng(0)
    junk = np.zeros_like(clean_decomp.specular_map.pixels)
    junk[clean_decomp.mask] = rng.normal(0.0, 0.05,
                                         size=junk[clean_decomp.mask].shape)
    noisy = dataclasses.replace(clean_decomp, specular_map=Raster(junk))
    assert physics_residual_score(noisy) > 0.9


def test_score_empty_mask_raises(clean_decomp):
    import copy

    buffers = copy.deepcopy(clean_decomp.buffers)
    buffers.mask[:] = False
    broken = dataclasses.replace(clean_decomp, buffers=buffers)
    with pytest.raises(ValueError, match="empty"):
        physics_residual_score(broken)


def test_score_subsampling_cap():
    """max_pixels caps work regardless of mask size."""
    from retispec.bench import _scorer_arrays

    class FakeDecomp:
        pass

    d = FakeDecomp()
    mask = np.ones((64, 64), dtype=bool)
    d.mask = mask
    d.specular_map = Raster(np.random.default_rng(1).random((64, 64, 3)))
    d.buffers = type("B", (), {})()
    d.buffers.normal_map = np.tile([0.0, 0.0, 1.0], (64, 64, 1))
    lum, normals = _scorer_arrays(d, max_pixels=100)
    assert lum.shape == (100,)
    assert normals.shape == (100, 3)


# ---------------------------------------------------------------------------
# AUC / ROC
# ---------------------------------------------------------------------------

def test_auc_hand_example():
    scores = np.array([0.1, 0.4, 0.35, 0.8])
    labels = np.array([0, 0, 1, 1])
    assert compute_auc(scores, labels) == 0.75


def test_auc_perfect_and_inverted():
    labels = np.array([0, 0, 1, 1])
    assert compute_auc(np.array([0.0, 0.1, 0.8, 0.9]), labels) == 1.0
    assert compute_auc(np.array([0.9, 0.8, 0.1, 0.0]), labels) == 0.0


def test_auc_all_ties_is_half():
    assert compute_auc(np.ones(6), np.array([0, 0, 0, 1, 1, 1])) == 0.5


def test_auc_routes_agree_on_random_sets():
    """Exact pair counting and the rank formula agree to 1e-12; compute_auc
    asserts this internally, so it just needs to be exercised."""
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(4, 60))
        labels = np.zeros(n, dtype=np.int64)
        labels[rng.choice(n, size=max(1, n // 3), replace=False)] = 1
        if labels.all() or not labels.any():
            continue
        scores = np.round(rng.random(n), 2)  # rounding forces ties
        auc = compute_auc(scores, labels)
        assert 0.0 <= auc <= 1.0


def test_auc_input_validation():
    with pytest.raises(ValueError, match="both classes"):
        compute_auc(np.array([0.5, 0.6]), np.array([1, 1]))
    with pytest.raises(ValueError, match="equal-length"):
        compute_auc(np.array([0.5]), np.array([1, 0]))


def test_roc_points_structure():
    scores = np.array([0.9, 0.8, 0.7, 0.1])
    labels = np.array([1, 0, 1, 0])
    rows = roc_points(scores, labels)
    assert rows[0] == (np.inf, 0.0, 0.0)
    assert rows[-1][1] == 1.0 and rows[-1][2] == 1.0
    tprs = [r[1] for r in rows]
    fprs = [r[2] for r in rows]
    assert all(b >= a for a, b in zip(tprs, tprs[1:]))
    assert all(b >= a for a, b in zip(fprs, fprs[1:]))


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------

def test_perturbation_none_returns_copy():
    img = Raster(np.random.default_rng(3).random((8, 8, 3)))
    out = apply_perturbation(img, "none")
    np.testing.assert_array_equal(out.pixels, img.pixels)
    assert out.pixels is not img.pixels


def test_perturbation_unknown_raises():
    with pytest.raises(ValueError, match="unknown perturbation"):
        apply_perturbation(Raster.constant(4, 4, 1), "sharpen")


def test_perturbation_noise_is_seeded():
    img = Raster.constant(16, 16, 3, value=0.5)
    a = apply_perturbation(img, "gaussian_noise", seed=4)
    b = apply_perturbation(img, "gaussian_noise", seed=4)
    c = apply_perturbation(img, "gaussian_noise", seed=5)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, c.pixels)
    assert abs(float(np.std(a.pixels - img.pixels)) - 0.02) < 0.002


def test_jpeg_like_constant_blocks_survive():
    """A constant image has only DC energy; quantization preserves it up to
    the table's DC step."""
    img = Raster.constant(16, 16, 3, value=0.5)
    out = jpeg_like(img, quality=75)
    assert np.abs(out.pixels - img.pixels).max() < 16.0 / 255.0
    assert np.ptp(out.pixels) < 1e-12


def test_jpeg_like_deadzone_quantizes_small_detail():
    """Detail smaller than half a quantization step vanishes entirely.

    The base level is chosen so no DCT coefficient sits on a quantizer bin
    boundary (0.5 exactly would put the DC term on one)."""
    rng = np.random.default_rng(5)
    base = np.full((8, 8, 1), 0.52)
    tiny = base + rng.uniform(-0.001, 0.001, size=base.shape)
    out_base = jpeg_like(Raster(base), quality=75)
    out_tiny = jpeg_like(Raster(tiny), quality=75)
    np.testing.assert_allclose(out_tiny.pixels, out_base.pixels, atol=1e-12)


def test_jpeg_like_nonmultiple_shape_preserved():
    img = Raster(np.random.default_rng(6).random((13, 10, 3)))
    out = jpeg_like(img)
    assert out.shape == (13, 10, 3)


def test_jpeg_like_is_deterministic_and_bounded():
    rng = np.random.default_rng(7)
    img = Raster(rng.uniform(0.1, 0.9, (32, 32, 3)))
    a = jpeg_like(img, quality=75)
    b = jpeg_like(img, quality=75)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    # per-pixel error is bounded by the quantizer steps; quality 75 keeps
    # it modest on smooth-to-moderate content
    assert np.abs(a.pixels - img.pixels).max() < 0.35
    assert a.pixels.shape == img.pixels.shape


# ---------------------------------------------------------------------------
# Evaluation loop
# ---------------------------------------------------------------------------

def test_evaluate_oracle_and_random(tiny_corpus, tmp_path):
    oracle = evaluate(tiny_corpus["manifest"], detector="oracle")
    assert oracle.auc == 1.0
    rand = evaluate(tiny_corpus["manifest"], detector="random", seed=1)
    assert 0.2 <= rand.auc <= 0.8  # 20 samples: wide but symmetric band


def test_evaluate_unknown_detector(tiny_corpus):
    with pytest.raises(ValueError, match="unknown detector"):
        evaluate(tiny_corpus["manifest"], detector="psychic")


def test_evaluate_model_needs_checkpoint(tiny_corpus):
    with pytest.raises(ValueError, match="checkpoint"):
        evaluate(tiny_corpus["manifest"], detector="model")


def test_evaluate_writes_report_files(tiny_corpus, tmp_path):
    out = tmp_path / "eval"
    report = evaluate(tiny_corpus["manifest"], detector="oracle", out_dir=out)
    assert (out / "report.json").exists()
    assert (out / "scores.csv").exists()
    assert (out / "roc.csv").exists()
    assert (out / "hist.csv").exists()
    with open(out / "report.json") as fh:
        payload = json.load(fh)
    assert payload["auc"] == report.auc
    lines = (out / "scores.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 20
    assert lines[0] == "sample_id,label,fake_mode,score,perturbation"


def test_evaluate_random_is_seed_deterministic(tiny_corpus):
    a = evaluate(tiny_corpus["manifest"], detector="random", seed=9)
    b = evaluate(tiny_corpus["manifest"], detector="random", seed=9)
    assert [r[3] for r in a.scores] == [r[3] for r in b.scores]


# ---------------------------------------------------------------------------
# Speed benchmark plumbing
# ---------------------------------------------------------------------------

def test_run_speed_benchmark_fields():
    from retispec.geometry import Camera, make_sphere, rasterize

    buffers = rasterize(make_sphere(n_lat=24, n_lon=48), Camera(), 48, 48)
    rng = np.random.default_rng(8)
    img = Raster(rng.uniform(0.1, 0.9, (48, 48, 3)))
    out = run_speed_benchmark(img, buffers, uv_resolution=16, k=4, iters=2)
    assert out["msr_seconds"] > 0
    assert out["pca_seconds"] > 0
    assert out["ratio"] == pytest.approx(out["pca_seconds"] / out["msr_seconds"])
