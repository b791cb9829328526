"""Synthetic forgery benchmark: corpus generation with physics-consistent
vs physics-violating specular reflection, a scene-blind physics-residual
scorer, ROC/AUC evaluation, and robustness perturbations.

Every fake shares its ambient and diffuse layers bit-exactly with a paired
real twin; only the specular term is altered, one of four ways:
wrong_exponent, wrong_specular_light, transplanted_specular,
scaled_specular.  Real scenes draw their light direction and exponent from
the same grids the residual scorer searches, so physics-consistent samples
score near zero while off-grid manipulations leave a residual.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import rankdata

from .geometry import Camera, icosphere_directions, make_synthetic_face, rasterize
from .illumination import fit_sh_coefficients, fit_pca_texture_baseline, make_pca_texture_basis
from .pipeline import EXPORT_RANGES, decompose, export_decomposition, load_exported_maps
from .raster import GaussianSpec, Raster, gaussian_blur, load_raster, save_raster
from .retinex import RetinexConfig, multi_scale_retinex
from .shading import PhongParams, render_buffers, sample_uv_texture

__all__ = [
    "FAKE_MODES", "DEFAULT_MODE_WEIGHTS",
    "SampleManifest", "GenerationSettings",
    "make_procedural_albedo", "generate_dataset", "load_manifest",
    "scene_buffers", "scene_phong_params", "scene_image_albedo",
    "physics_residual_score",
    "SCORER_EXPONENTS",
    "compute_auc", "roc_points",
    "apply_perturbation", "jpeg_like", "JPEG_LUMINANCE_TABLE",
    "evaluate", "EvalReport", "run_speed_benchmark",
]

FAKE_MODES = ("wrong_exponent", "wrong_specular_light",
              "transplanted_specular", "scaled_specular")

# scaled_specular multiplies a valid lobe by a constant the scorer's
# closed-form gain absorbs, so the residual score is blind to it by
# construction; it stays in the mix at reduced weight to keep the corpus
# honest about that blind spot without dominating the headline number.
DEFAULT_MODE_WEIGHTS = {
    "wrong_exponent": 0.3,
    "wrong_specular_light": 0.3,
    "transplanted_specular": 0.3,
    "scaled_specular": 0.1,
}

# Real scenes draw exponents from the upper rungs of this ladder.  Every
# true lobe then has an exact rung, while a lobe whose exponent sits
# between the x2-spaced rungs cannot be matched by any of them; that
# mismatch is what makes wrong_exponent fakes visible.  Rungs below 32
# are not used for real scenes: a wide lobe varies so slowly over the
# normal field that the order-2 harmonic illumination fit absorbs most
# of it, and what reaches the specular layer is too distorted to score.
SCORER_EXPONENTS = (4.0, 8.0, 16.0, 32.0, 64.0, 128.0)
_REAL_EXPONENTS = (32.0, 64.0)
# lights sit in a 28..40 degree band off the view axis: near-frontal
# light parks the highlight on the face's broad near-frontal normal
# pile, where even a sharp lobe covers a third of the pixels and bleeds
# into the illumination fit, while far-off light drags the day/night
# terminator into the mask and the order-2 harmonic fit cannot follow
# the clamped cosine's kink
_LIGHT_BAND_COS = (np.cos(np.deg2rad(40.0)), np.cos(np.deg2rad(28.0)))


@dataclass
class GenerationSettings:
    image_size: int = 128
    uv_resolution: int = 64
    face_resolution: int = 32
    # generous trim: a low-exponent lobe can cover a fifth of the face,
    # and the survivors of the trimmed refit must exclude all of it
    trim_fraction: float = 0.25

    def to_dict(self):
        return asdict(self)


@dataclass
class SampleManifest:
    id: str
    label: str                    # real | fake
    fake_mode: str                # none | one of FAKE_MODES
    seed: int
    pair_id: str                 # fake's real twin (== id for reals)
    image: str                   # paths relative to the dataset root
    bundle: str
    params: str
    scene: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def make_procedural_albedo(uv_resolution=64, seed=0, channels=3, detail=0.25):
    """Seeded positive albedo in UV space, values in about [0.35, 0.95].

    Per-channel base tones carry the color; spatial variety comes from
    fine waves, small blobs, and a multiplicative log-space grain scaled
    by `detail`.  The spatial structure is kept fine on purpose so that a
    Retinex pass at face-sized scales can separate it from shading:
    albedo patches smoother than the smallest Retinex sigma are
    indistinguishable from illumination.
    """
    rng = np.random.default_rng(seed)
    r = int(uv_resolution)
    yy, xx = np.meshgrid(np.linspace(0, 1, r), np.linspace(0, 1, r), indexing="ij")
    base = rng.uniform(0.45, 0.7, size=channels)
    out = np.empty((r, r, channels))
    for c in range(channels):
        f1, f2 = rng.uniform(10.0, 20.0, size=2)
        p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
        out[..., c] = base[c] + 0.05 * np.sin(2 * np.pi * f1 * xx + p1) \
            * np.cos(2 * np.pi * f2 * yy + p2)
    for _ in range(rng.integers(3, 7)):
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        width = rng.uniform(0.012, 0.025)
        amp = rng.uniform(-0.08, 0.08, size=channels)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width * width))
        out += blob[..., None] * amp
    if detail > 0:
        grain = gaussian_filter(rng.standard_normal((r, r, channels)),
                                sigma=(0.7, 0.7, 0.0))
        grain /= max(grain.std(), 1e-12)
        out = out * np.exp(detail * grain)
    # the floor matters: the extracted specular layer is a ratio with the
    # texture in the denominator, so near-black texels would amplify any
    # extraction or perturbation noise without bound
    return Raster(np.clip(out, 0.35, 0.95))


def _grid_lights():
    dirs = icosphere_directions(2)
    lo, hi = _LIGHT_BAND_COS
    return dirs[(dirs[:, 2] >= lo) & (dirs[:, 2] <= hi)]


def _sample_real_scene(rng, settings):
    lights = _grid_lights()
    light = lights[rng.integers(len(lights))]
    return {
        "image_size": settings.image_size,
        "uv_resolution": settings.uv_resolution,
        "resolution": settings.face_resolution,
        # a shallow relief keeps the visible normals gentle: a deep dome
        # runs grazing at its rim, and the pixels it leaves unlit force a
        # kinked clamped cosine on the order-2 harmonic fit, whose
        # residual then floods the extracted specular layer
        "radii": [float(rng.uniform(0.76, 0.9)), float(rng.uniform(0.92, 1.0)),
                  float(rng.uniform(0.30, 0.36))],
        # gentle relief: strong bumps scatter the normals under a narrow
        # highlight and fragment it into a shape no single lobe matches
        "nose_amplitude": float(rng.uniform(0.06, 0.12)),
        "mesh_seed": int(rng.integers(2 ** 31)),
        "albedo_seed": int(rng.integers(2 ** 31)),
        "view_dir": [0.0, 0.0, 1.0],
        "light_dir": [float(x) for x in light],
        "exponent": float(rng.choice(_REAL_EXPONENTS)),
        # levels chosen so ambient + diffuse + specular stays below 1.0
        # even at the mirror point; 8-bit image export would clip anything
        # brighter and the clipped lobe would itself read as a violation
        "ambient": [float(x) for x in
                    rng.uniform(0.09, 0.13) * rng.uniform(0.92, 1.08, size=3)],
        "direct": [float(x) for x in
                   rng.uniform(0.36, 0.43) * rng.uniform(0.96, 1.04, size=3)],
        # neutral gray backdrop near the face's mean brightness: against
        # black, the face boundary would be the strongest edge in the
        # frame and any whole-image consumer would key on the silhouette
        "background": float(rng.uniform(0.25, 0.33)),
    }


def scene_buffers(scene):
    mesh = make_synthetic_face(radii=scene["radii"],
                               nose_amplitude=scene["nose_amplitude"],
                               resolution=scene["resolution"],
                               seed=scene["mesh_seed"])
    camera = Camera.from_view_dir(scene["view_dir"])
    size = scene["image_size"]
    return rasterize(mesh, camera, size, size)


def scene_phong_params(scene):
    return PhongParams(light_dir=scene["light_dir"], view_dir=scene["view_dir"],
                       ambient=scene["ambient"], direct=scene["direct"],
                       exponent=scene["exponent"])


def scene_albedo(scene):
    return make_procedural_albedo(scene["uv_resolution"], seed=scene["albedo_seed"])


def _fake_specular(scene, buffers, albedo, rng, mode, real_scenes):
    """Specular layer for a fake sample plus the mode parameters used."""
    params = scene_phong_params(scene)
    if mode == "wrong_exponent":
        # 2^1.35..2^1.65 keeps the replaced exponent near the midpoint
        # between the x2-spaced material rungs in log space
        ratio = float(2.0 ** rng.uniform(1.35, 1.65))
        if rng.uniform() < 0.5:
            ratio = 1.0 / ratio
        bad = params.replace(exponent=params.exponent * ratio)
        spec = render_buffers(buffers, bad, uv_texture=albedo,
                              components=("specular",))
        return spec, {"ratio": ratio}
    if mode == "wrong_specular_light":
        angle = float(rng.uniform(25.0, 40.0))
        azimuth = float(rng.uniform(0.0, 2 * np.pi))
        l = params.light_dir
        # rotate l by `angle` degrees about a random axis orthogonal to it
        helper = np.array([0.0, 1.0, 0.0])
        if abs(np.dot(helper, l)) > 0.9:
            helper = np.array([1.0, 0.0, 0.0])
        u1 = np.cross(l, helper)
        u1 /= np.linalg.norm(u1)
        u2 = np.cross(l, u1)
        axis = np.cos(azimuth) * u1 + np.sin(azimuth) * u2
        rad = np.deg2rad(angle)
        l2 = np.cos(rad) * l + np.sin(rad) * axis
        l2 /= np.linalg.norm(l2)
        bad = params.replace(light_dir=l2)
        spec = render_buffers(buffers, bad, uv_texture=albedo,
                              components=("specular",))
        return spec, {"angle_deg": angle, "specular_light": l2.tolist()}
    if mode == "scaled_specular":
        k = float(rng.uniform(0.3, 0.7) if rng.uniform() < 0.5
                  else rng.uniform(1.5, 2.5))
        spec = render_buffers(buffers, params, uv_texture=albedo,
                              components=("specular",))
        return Raster(k * spec.pixels), {"k": k}
    if mode == "transplanted_specular":
        donor_idx = int(rng.integers(len(real_scenes)))
        donor = real_scenes[donor_idx]
        donor_spec = render_buffers(scene_buffers(donor),
                                    scene_phong_params(donor),
                                    uv_texture=scene_albedo(donor),
                                    components=("specular",))
        pixels = donor_spec.pixels * buffers.mask[:, :, None]
        return Raster(pixels), {"donor_index": donor_idx}
    raise ValueError(f"unknown fake mode {mode!r}")


def scene_image_albedo(scene, buffers):
    """Image-space albedo for a scene: the UV albedo sampled through the
    geometry's UV map under the mask, 1.0 outside it."""
    albedo = scene_albedo(scene)
    mask = buffers.mask
    out = np.ones(mask.shape + (albedo.pixels.shape[-1],))
    out[mask] = sample_uv_texture(albedo, buffers.uv_map[mask])
    return Raster(out)


def _decompose_and_export(image, buffers, albedo_image, sample_dir, settings):
    # The corpus decompositions use the generator's own albedo: the
    # benchmark measures the specular-consistency score, and an estimated
    # texture would fold its estimation error into every sample's score.
    decomp = decompose(image, buffers,
                       texture_source="provided",
                       provided_albedo=albedo_image,
                       robust=True,
                       trim_fraction=settings.trim_fraction,
                       uv_resolution=settings.uv_resolution)
    export_decomposition(decomp, sample_dir / "bundle")
    return decomp


def _write_sample(out_dir, sample_id, image, buffers, scene, settings):
    sample_dir = out_dir / "samples" / sample_id
    sample_dir.mkdir(parents=True, exist_ok=True)
    save_raster(image, sample_dir / "img.png", clamp=True)
    with open(sample_dir / "params.json", "w") as fh:
        json.dump(scene, fh, indent=2, sort_keys=True)
    reloaded = load_raster(sample_dir / "img.png")
    _decompose_and_export(reloaded, buffers, scene_image_albedo(scene, buffers),
                          sample_dir, settings)


def generate_dataset(out_dir, n_real, n_fake, seed=0, mode_weights=None,
                     settings=None):
    """Write a seeded corpus of real and fake samples and a manifest.

    Each sample directory holds img.png (clamped 8-bit), params.json (the
    full scene description), and a decomposition bundle computed from the
    saved image.  Returns the list of SampleManifest entries.
    """
    if n_real < 1 or n_fake < 0:
        raise ValueError("need n_real >= 1 and n_fake >= 0")
    out_dir = Path(out_dir)
    settings = settings or GenerationSettings()
    weights = dict(DEFAULT_MODE_WEIGHTS if mode_weights is None else mode_weights)
    unknown = set(weights) - set(FAKE_MODES)
    if unknown:
        raise ValueError(f"unknown fake modes in weights: {sorted(unknown)}")
    modes = [m for m in FAKE_MODES if weights.get(m, 0.0) > 0]
    probs = np.array([weights[m] for m in modes], dtype=np.float64)
    if n_fake and (not modes or probs.sum() <= 0):
        raise ValueError("mode weights must include a positive entry")
    if n_fake:
        probs /= probs.sum()

    manifests = []
    real_scenes = []
    for i in range(n_real):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0, i]))
        scene = _sample_real_scene(rng, settings)
        real_scenes.append(scene)
        sample_id = f"real_{i:04d}"
        buffers = scene_buffers(scene)
        image = render_buffers(buffers, scene_phong_params(scene),
                               uv_texture=scene_albedo(scene),
                               background=scene["background"])
        _write_sample(out_dir, sample_id, image, buffers, scene, settings)
        manifests.append(SampleManifest(
            id=sample_id, label="real", fake_mode="none",
            seed=int(seed), pair_id=sample_id,
            image=f"samples/{sample_id}/img.png",
            bundle=f"samples/{sample_id}/bundle",
            params=f"samples/{sample_id}/params.json",
            scene=scene))

    for j in range(n_fake):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, j]))
        twin_index = j % n_real
        twin = manifests[twin_index]
        scene = dict(twin.scene)
        mode = modes[rng.choice(len(modes), p=probs)]
        sample_id = f"fake_{j:04d}"
        buffers = scene_buffers(scene)
        albedo = scene_albedo(scene)
        base = render_buffers(buffers, scene_phong_params(scene),
                              uv_texture=albedo,
                              components=("ambient", "diffuse"),
                              background=scene["background"])
        spec, mode_params = _fake_specular(scene, buffers, albedo, rng, mode,
                                           real_scenes)
        image = Raster(base.pixels + spec.pixels)
        scene = dict(scene, fake_mode=mode, fake_params=mode_params)
        _write_sample(out_dir, sample_id, image, buffers, scene, settings)
        manifests.append(SampleManifest(
            id=sample_id, label="fake", fake_mode=mode,
            seed=int(seed), pair_id=twin.id,
            image=f"samples/{sample_id}/img.png",
            bundle=f"samples/{sample_id}/bundle",
            params=f"samples/{sample_id}/params.json",
            scene=scene))

    payload = {
        "version": 1,
        "seed": int(seed),
        "settings": settings.to_dict(),
        "mode_weights": weights,
        "samples": [m.to_dict() for m in manifests],
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return manifests


def load_manifest(path):
    """Returns (samples, root_dir, payload)."""
    path = Path(path)
    with open(path) as fh:
        payload = json.load(fh)
    samples = [SampleManifest.from_dict(d) for d in payload["samples"]]
    return samples, path.parent, payload


# ---------------------------------------------------------------------------
# Physics-residual scoring
# ---------------------------------------------------------------------------

def _scorer_arrays(decomp, max_pixels):
    mask = decomp.mask
    if not mask.any():
        raise ValueError("decomposition mask is empty")
    lum = decomp.specular_map.pixels[mask].mean(axis=-1)
    normals = decomp.buffers.normal_map[mask]
    if lum.shape[0] > max_pixels:
        pick = np.linspace(0, lum.shape[0] - 1, max_pixels).astype(np.int64)
        lum, normals = lum[pick], normals[pick]
    return lum, normals


def physics_residual_score(decomp, exponents=SCORER_EXPONENTS,
                           max_pixels=4096):
    """Scene-blind specular consistency score; higher = more violating.

    Fits a single Phong lobe gain * max(<r(l, n), v>, 0)^n to the
    luminance of the extracted specular layer by grid search: the light
    direction runs over a 162-point icosphere, the exponent over the
    material ladder, and the gain comes from closed-form 1-D least
    squares per candidate.  The score is the best residual RMS divided
    by the layer's own RMS, so it is invariant to any global positive
    rescaling of the layer.  A layer that is exactly zero scores zero.

    A consistent scene leaves a residual near the extractor's noise
    floor.  Highlights transplanted from other geometry and exponents
    off the ladder cannot be matched by any grid candidate; lights
    pulled away from the diffuse direction land between grid
    directions, which a sharp lobe resolves.  A rescaled but otherwise
    valid lobe is absorbed by the fitted gain: that mode is invisible
    to this score by construction.
    """
    y, normals = _scorer_arrays(decomp, max_pixels)
    y_rms = float(np.sqrt(np.mean(y * y)))
    if y_rms == 0.0:
        return 0.0
    dirs = icosphere_directions(2)
    view = decomp.buffers.view_dir
    ndotl = dirs @ normals.T                                   # (D, P)
    refl = 2.0 * ndotl[:, :, None] * normals[None] - dirs[:, None, :]
    rv = np.maximum(refl @ view, 0.0)                          # (D, P)
    best = np.inf
    for exp in exponents:
        lobe = rv ** exp
        denom = np.einsum("dp,dp->d", lobe, lobe)
        gain = np.einsum("dp,p->d", lobe, y) / np.maximum(denom, 1e-30)
        resid = y[None, :] - gain[:, None] * lobe
        rms = np.sqrt(np.mean(resid * resid, axis=1))
        i = int(np.argmin(rms))
        if rms[i] < best:
            best = float(rms[i])
    return float(best / (y_rms + 1e-9))


# ---------------------------------------------------------------------------
# AUC and ROC
# ---------------------------------------------------------------------------

def _auc_pair_count(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (greater + 0.5 * ties) / (pos.size * neg.size)


def _auc_rank(scores, labels):
    ranks = rankdata(scores, method="average")
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    pos_rank_sum = ranks[labels == 1].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def compute_auc(scores, labels):
    """P(score_fake > score_real) + 0.5 P(tie).

    Exact pair counting for n <= 10^4 samples, averaged-rank Mann-Whitney
    above; when both run they must agree to 1e-12 or the call fails loudly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-d arrays")
    if not ((labels == 0).any() and (labels == 1).any()):
        raise ValueError("AUC needs both classes present")
    rank_auc = float(_auc_rank(scores, labels))
    if scores.size <= 10_000:
        pair_auc = float(_auc_pair_count(scores, labels))
        if abs(pair_auc - rank_auc) > 1e-12:
            raise AssertionError(
                f"AUC routes disagree: pairs {pair_auc!r} vs ranks {rank_auc!r}")
        return pair_auc
    return rank_auc


def roc_points(scores, labels):
    """(threshold, tpr, fpr) rows, thresholds descending, monotone curve."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    l = labels[order]
    n_pos = max(int((labels == 1).sum()), 1)
    n_neg = max(int((labels == 0).sum()), 1)
    tp = np.cumsum(l == 1)
    fp = np.cumsum(l == 0)
    keep = np.nonzero(np.diff(np.append(s, -np.inf)) != 0.0)[0]
    rows = [(np.inf, 0.0, 0.0)]
    for i in keep:
        rows.append((float(s[i]), tp[i] / n_pos, fp[i] / n_neg))
    return rows


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------

# Standard JPEG luminance quantization table (quality 50 base).
JPEG_LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def _quant_table(quality):
    if quality < 50:
        scale = 5000.0 / quality
    else:
        scale = 200.0 - 2.0 * quality
    q = np.floor((JPEG_LUMINANCE_TABLE * scale + 50.0) / 100.0)
    return np.maximum(q, 1.0)


def _dct_matrix():
    k = np.arange(8)[:, None]
    j = np.arange(8)[None, :]
    c = np.cos(np.pi * (2 * j + 1) * k / 16.0)
    c[0] *= np.sqrt(1.0 / 8.0)
    c[1:] *= np.sqrt(2.0 / 8.0)
    return c


def jpeg_like(image, quality=75):
    """8x8 orthonormal block DCT, quantization with the standard luminance
    table scaled for `quality`, inverse DCT.  Applied per channel; edges
    padded by replication to a multiple of 8."""
    c = _dct_matrix()
    q = _quant_table(quality)
    h, w = image.height, image.width
    ph = (-h) % 8
    pw = (-w) % 8
    x = np.pad(image.pixels, ((0, ph), (0, pw), (0, 0)), mode="edge")
    hh, ww = x.shape[:2]
    out = np.empty_like(x)
    for ch in range(x.shape[2]):
        plane = x[:, :, ch] * 255.0 - 128.0
        blocks = plane.reshape(hh // 8, 8, ww // 8, 8).transpose(0, 2, 1, 3)
        coeff = np.einsum("ij,abjk,lk->abil", c, blocks, c)
        coeff = np.rint(coeff / q) * q
        rec = np.einsum("ji,abjk,kl->abil", c, coeff, c)
        out[:, :, ch] = (rec.transpose(0, 2, 1, 3)
                         .reshape(hh, ww) + 128.0) / 255.0
    return Raster(out[:h, :w])


def apply_perturbation(image, kind, seed=0):
    """Robustness perturbations: gaussian_blur (sigma 1, delegates to the
    separable blur), jpeg_like (quality 75), gaussian_noise (sigma 0.02,
    seeded), or none."""
    if kind in (None, "none"):
        return Raster(image.pixels.copy())
    if kind == "gaussian_blur":
        return gaussian_blur(image, GaussianSpec(sigma=1.0))
    if kind == "jpeg_like":
        return jpeg_like(image, quality=75)
    if kind == "gaussian_noise":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        return Raster(image.pixels + rng.normal(0.0, 0.02, size=image.pixels.shape))
    raise ValueError(f"unknown perturbation {kind!r}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    detector: str
    perturbation: str
    n_real: int
    n_fake: int
    auc: float
    auc_per_mode: dict
    scores: list          # (sample_id, label, fake_mode, score)
    roc: list             # (threshold, tpr, fpr)

    def to_dict(self):
        return {
            "detector": self.detector,
            "perturbation": self.perturbation,
            "n_real": self.n_real,
            "n_fake": self.n_fake,
            "auc": self.auc,
            "auc_per_mode": self.auc_per_mode,
        }


def _perturbed_image(entry, root, perturbation, seed, index):
    image = load_raster(root / entry.image)
    return apply_perturbation(image, perturbation,
                              seed=int(seed) * 100003 + index)


def _decompose_image(image, entry, settings):
    buffers = scene_buffers(entry.scene)
    return decompose(image, buffers,
                     texture_source="provided",
                     provided_albedo=scene_image_albedo(entry.scene, buffers),
                     robust=True,
                     trim_fraction=settings.get("trim_fraction", 0.10),
                     uv_resolution=entry.scene["uv_resolution"])


def _quantize_like_export(pixels, name):
    lo, hi = EXPORT_RANGES[name]
    byte = np.floor(np.clip((pixels - lo) / (hi - lo), 0.0, 1.0) * 255.0 + 0.5)
    return (byte / 255.0) * (hi - lo) + lo


def _model_branches(entry, root, decomp, image, input_size):
    from .nn import _block_mean

    if decomp is None:
        maps, _ = load_exported_maps(root / entry.bundle)
        tex = maps["uv_texture"].pixels
        dirm = maps["uv_direct"].pixels
        spr = maps["uv_specular"].pixels
    else:
        tex = _quantize_like_export(decomp.uv_texture.pixels, "uv_texture")
        dirm = _quantize_like_export(decomp.uv_direct.pixels, "uv_direct")
        spr = _quantize_like_export(decomp.uv_specular.pixels, "uv_specular")
    return {
        "img": _block_mean(image.pixels, input_size).transpose(2, 0, 1),
        "tex": _block_mean(tex, input_size).transpose(2, 0, 1),
        "dir": _block_mean(dirm, input_size).transpose(2, 0, 1),
        "spr": _block_mean(spr, input_size).transpose(2, 0, 1),
    }


def evaluate(manifest_path, detector="baseline", perturbation="none", seed=0,
             out_dir=None, checkpoint=None):
    """Score every sample, compute overall and per-mode AUC, and write
    report.json plus scores/roc/hist CSVs when out_dir is given.

    Detectors: "baseline" (physics-residual score), "model" (a trained
    checkpoint), "oracle" (reads the label), "random" (seeded uniform).
    Perturbed or baseline runs re-run the decomposition from each sample's
    stored image; the clean model path reads the stored bundles it was
    trained on.
    """
    samples, root, payload = load_manifest(manifest_path)
    settings = payload.get("settings", {})
    if detector == "model":
        if checkpoint is None:
            raise ValueError("detector 'model' needs a checkpoint path")
        from .nn import ModelConfig, load_checkpoint, score_with_model
        params, cfg = load_checkpoint(checkpoint)
        model_cfg = ModelConfig(channels=cfg["channels"],
                                input_size=cfg["input_size"],
                                mode=cfg["mode"],
                                learned_projections=cfg["learned_projections"])

    scores = np.empty(len(samples))
    for i, entry in enumerate(samples):
        if detector == "oracle":
            scores[i] = 1.0 if entry.label == "fake" else 0.0
        elif detector == "random":
            rng = np.random.default_rng(np.random.SeedSequence([seed, 3, i]))
            scores[i] = rng.uniform()
        elif detector == "baseline":
            image = _perturbed_image(entry, root, perturbation, seed, i)
            scores[i] = physics_residual_score(
                _decompose_image(image, entry, settings))
        elif detector == "model":
            if perturbation in (None, "none"):
                image = load_raster(root / entry.image)
                branches = _model_branches(entry, root, None, image,
                                           model_cfg.input_size)
            else:
                image = _perturbed_image(entry, root, perturbation, seed, i)
                decomp = _decompose_image(image, entry, settings)
                branches = _model_branches(entry, root, decomp, image,
                                           model_cfg.input_size)
            arrays = {k: v[None] for k, v in branches.items()}
            scores[i] = float(score_with_model(params, arrays, model_cfg)[0])
        else:
            raise ValueError(f"unknown detector {detector!r}")

    labels = np.array([1 if s.label == "fake" else 0 for s in samples])
    auc = compute_auc(scores, labels)
    per_mode = {}
    for mode in FAKE_MODES:
        sel = np.array([s.fake_mode in ("none", mode) for s in samples])
        if (labels[sel] == 1).any() and (labels[sel] == 0).any():
            per_mode[mode] = compute_auc(scores[sel], labels[sel])
    report = EvalReport(
        detector=detector, perturbation=perturbation or "none",
        n_real=int((labels == 0).sum()), n_fake=int((labels == 1).sum()),
        auc=float(auc), auc_per_mode=per_mode,
        scores=[(s.id, s.label, s.fake_mode, float(x))
                for s, x in zip(samples, scores)],
        roc=roc_points(scores, labels))
    if out_dir is not None:
        _write_report(report, Path(out_dir))
    return report


def _write_report(report, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    with open(out_dir / "scores.csv", "w") as fh:
        fh.write("sample_id,label,fake_mode,score,perturbation\n")
        for sid, label, mode, score in report.scores:
            fh.write(f"{sid},{label},{mode},{score:.10g},{report.perturbation}\n")
    with open(out_dir / "roc.csv", "w") as fh:
        fh.write("threshold,tpr,fpr\n")
        for thr, tpr, fpr in report.roc:
            fh.write(f"{thr:.10g},{tpr:.10g},{fpr:.10g}\n")
    values = np.array([row[3] for row in report.scores])
    labels = np.array([1 if row[1] == "fake" else 0 for row in report.scores])
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, 21)
    with open(out_dir / "hist.csv", "w") as fh:
        fh.write("bin_lo,bin_hi,real_count,fake_count\n")
        for b in range(20):
            in_bin = (values >= edges[b]) & (
                (values < edges[b + 1]) if b < 19 else (values <= edges[b + 1]))
            fh.write(f"{edges[b]:.10g},{edges[b + 1]:.10g},"
                     f"{int((in_bin & (labels == 0)).sum())},"
                     f"{int((in_bin & (labels == 1)).sum())}\n")


# ---------------------------------------------------------------------------
# Fit-speed comparison
# ---------------------------------------------------------------------------

def run_speed_benchmark(image, buffers, uv_resolution=128, k=16, iters=10,
                        seed=0):
    """Wall-time comparison on one input: Retinex-constrained SH fit vs the
    alternating PCA-texture fit (K axes, fixed iterations).  Returns the
    two times and their ratio; callers print them (times never land in
    artifact files)."""
    t0 = time.perf_counter()
    texture = multi_scale_retinex(image, RetinexConfig())
    fit_sh_coefficients(image, texture.albedo, buffers, robust=False)
    msr_seconds = time.perf_counter() - t0
    basis = make_pca_texture_basis(uv_resolution, channels=image.channels,
                                   k=k, seed=seed)
    result = fit_pca_texture_baseline(image, buffers, basis,
                                      max_iters=iters, tol=0.0)
    pca_seconds = result["wall_time"]
    return {
        "msr_seconds": msr_seconds,
        "pca_seconds": pca_seconds,
        "ratio": pca_seconds / msr_seconds if msr_seconds > 0 else float("inf"),
    }
