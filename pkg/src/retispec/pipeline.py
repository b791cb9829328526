"""End-to-end decomposition of a face image over known geometry into
texture, ambient, direct, and specular layers, plus UV-flattened variants.

Stages: Retinex texture estimation (or a caller-provided albedo), SH
lighting fit, ambient/direct separation, residual specular extraction

    SPR[p] = (I[p] - (h(n_p) . gamma) * T[p]) / max(T[p], eps_div)

and UV flattening of the texture/direct/specular maps.  The unclamped
ambient+direct split is kept so the reconstruction identity

    (ambient + direct + SPR) * T == I     (under the mask)

holds to floating-point accuracy.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, GeometryBuffers, GeometryError, Mesh, rasterize, uv_flatten
from .illumination import FitError, SHCoefficients, fit_sh_coefficients, sh_basis, split_ambient_direct
from .raster import Raster, load_raster, log_map, save_raster
from .retinex import RetinexConfig, TextureMap, multi_scale_retinex
from .validation import check_image_array

__all__ = [
    "EPSILON_DIV",
    "DecompositionError",
    "Decomposition",
    "extract_specular",
    "decompose",
    "reconstruction_error",
    "EXPORT_RANGES",
    "export_decomposition",
    "load_exported_maps",
]

EPSILON_DIV = 1e-3

# Fixed affine ranges for 8-bit map export.  Using the same range for every
# sample keeps exported bytes comparable across a corpus (a per-sample
# min/max would erase scale differences the detector depends on); the range
# is recorded in the meta sidecar for exact inversion.
EXPORT_RANGES = {
    "texture": (0.0, 1.0),
    "direct": (0.0, 2.0),
    "specular": (-1.0, 2.0),
    "uv_texture": (0.0, 1.0),
    "uv_direct": (0.0, 2.0),
    "uv_specular": (-1.0, 2.0),
}


class DecompositionError(Exception):
    """Pipeline failure annotated with the stage that raised it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class Decomposition:
    texture: TextureMap
    ambient_map: Raster
    direct_map: Raster          # unclamped directional radiance
    specular_map: Raster
    uv_texture: Raster
    uv_direct: Raster
    uv_specular: Raster
    coeffs: SHCoefficients
    buffers: GeometryBuffers
    meta: dict = field(default_factory=dict)

    @property
    def mask(self):
        return self.buffers.mask


def extract_specular(image, texture_albedo, coeffs, buffers, epsilon_div=EPSILON_DIV):
    """Residual specular map under the mask, zero elsewhere.

    Negative values are fit residual structure and are kept as-is.
    """
    mask = buffers.mask
    if not mask.any():
        raise ValueError("mask is empty")
    img = image.pixels[mask]
    tex = texture_albedo.pixels[mask]
    basis = sh_basis(buffers.normal_map[mask])
    model = (basis @ coeffs.gamma) * tex
    spr = (img - model) / np.maximum(tex, epsilon_div)
    out = np.zeros_like(image.pixels)
    out[mask] = spr
    return Raster(out)


def _stage(timings, name):
    class _Timer:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            timings[name] = time.perf_counter() - self.t0
            if exc is not None and not isinstance(exc, DecompositionError):
                raise DecompositionError(name, str(exc)) from exc
            return False

    return _Timer()


def decompose(image, geometry, camera=None, retinex_config=None,
              texture_source="msr", provided_albedo=None, robust=True,
              trim_fraction=0.10, uv_resolution=128, epsilon_div=EPSILON_DIV):
    """Run the full decomposition over a mesh or prebuilt geometry buffers.

    texture_source selects the albedo estimate: "msr" runs Multi-Scale
    Retinex on the image; "provided" uses provided_albedo (a Raster,
    strictly positive under the mask).  Per-stage wall times land in
    meta["timings"]; they are never written to exported artifacts.
    """
    if texture_source not in ("msr", "provided"):
        raise DecompositionError("texture", f"unknown texture_source {texture_source!r}")
    timings = {}

    with _stage(timings, "geometry"):
        if isinstance(geometry, GeometryBuffers):
            buffers = geometry
        elif isinstance(geometry, Mesh):
            cam = camera if camera is not None else Camera()
            buffers = rasterize(geometry, cam, image.width, image.height)
        else:
            raise GeometryError(f"geometry must be Mesh or GeometryBuffers, got "
                                f"{type(geometry).__name__}")
        if buffers.mask.shape != (image.height, image.width):
            raise GeometryError("geometry buffers do not match the image shape")

    with _stage(timings, "texture"):
        if texture_source == "msr":
            config = retinex_config if retinex_config is not None else RetinexConfig()
            texture = multi_scale_retinex(image, config)
        else:
            if provided_albedo is None:
                raise ValueError("texture_source='provided' needs provided_albedo")
            pixels = check_image_array(provided_albedo.pixels, "provided_albedo")
            if pixels.shape != image.pixels.shape:
                raise ValueError("provided albedo shape differs from image")
            if np.any(pixels[buffers.mask] <= 0.0):
                raise ValueError("provided albedo must be positive under the mask")
            config = retinex_config if retinex_config is not None else RetinexConfig()
            texture = TextureMap(log_albedo=log_map(provided_albedo),
                                 albedo=provided_albedo)

    with _stage(timings, "fit"):
        coeffs = fit_sh_coefficients(image, texture.albedo, buffers,
                                     robust=robust, trim_fraction=trim_fraction)

    with _stage(timings, "split"):
        ambient_map, direct_map = split_ambient_direct(coeffs, buffers, clamp=False)
        mask = buffers.mask
        dvals = direct_map.pixels[mask]
        negative_fraction = float(np.mean(dvals < 0.0)) if dvals.size else 0.0

    with _stage(timings, "specular"):
        specular_map = extract_specular(image, texture.albedo, coeffs, buffers,
                                        epsilon_div=epsilon_div)

    with _stage(timings, "flatten"):
        uv_texture = uv_flatten(texture.albedo, buffers, uv_resolution)
        uv_direct = uv_flatten(direct_map, buffers, uv_resolution)
        uv_specular = uv_flatten(specular_map, buffers, uv_resolution)

    meta = {
        "texture_source": texture_source,
        "retinex": config.to_dict(),
        "robust": bool(robust),
        "trim_fraction": float(trim_fraction),
        "uv_resolution": int(uv_resolution),
        "epsilon_div": float(epsilon_div),
        "view_dir": buffers.view_dir.tolist(),
        "ambient_rgb": (ambient_map.pixels[mask][0].tolist()
                        if mask.any() else None),
        "direct_negative_fraction": negative_fraction,
        "timings": timings,
    }
    return Decomposition(texture=texture, ambient_map=ambient_map,
                         direct_map=direct_map, specular_map=specular_map,
                         uv_texture=uv_texture, uv_direct=uv_direct,
                         uv_specular=uv_specular, coeffs=coeffs,
                         buffers=buffers, meta=meta)


def reconstruction_error(decomp, image):
    """L-infinity error of (ambient + direct + specular) * texture vs the
    image, under the mask."""
    mask = decomp.mask
    lhs = (decomp.ambient_map.pixels + decomp.direct_map.pixels
           + decomp.specular_map.pixels) * decomp.texture.albedo.pixels
    diff = np.abs(lhs[mask] - image.pixels[mask])
    return float(diff.max()) if diff.size else 0.0


# ---------------------------------------------------------------------------
# Export bundle: 6 PNG maps + coeffs.json + meta.json
# ---------------------------------------------------------------------------

def _scaled_for_export(pixels, lo, hi):
    return np.clip((pixels - lo) / (hi - lo), 0.0, 1.0)


def export_decomposition(decomp, out_dir):
    """Write the six maps as 8-bit PNGs plus coeffs.json and meta.json.

    Maps are clamped to the fixed ranges in EXPORT_RANGES and affinely
    scaled to [0, 1]; the ranges are recorded under meta["scales"].  Output
    is byte-identical across reruns (timings stay out of the files).
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = {
        "texture": decomp.texture.albedo,
        "direct": decomp.direct_map,
        "specular": decomp.specular_map,
        "uv_texture": decomp.uv_texture,
        "uv_direct": decomp.uv_direct,
        "uv_specular": decomp.uv_specular,
    }
    for name, raster in maps.items():
        lo, hi = EXPORT_RANGES[name]
        save_raster(Raster(_scaled_for_export(raster.pixels, lo, hi)),
                    out_dir / f"{name}.png")
    with open(out_dir / "coeffs.json", "w") as fh:
        json.dump({"gamma": decomp.coeffs.to_list()}, fh, indent=2, sort_keys=True)
    meta = {k: v for k, v in decomp.meta.items() if k != "timings"}
    meta["scales"] = {name: list(EXPORT_RANGES[name]) for name in maps}
    with open(out_dir / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_exported_maps(bundle_dir, names=("uv_texture", "uv_direct", "uv_specular")):
    """Read exported maps back to their original value scale (inverse of the
    recorded affine), quantized at 8-bit resolution."""
    with open(bundle_dir / "meta.json") as fh:
        meta = json.load(fh)
    out = {}
    for name in names:
        lo, hi = meta["scales"][name]
        image = load_raster(bundle_dir / f"{name}.png")
        out[name] = Raster(image.pixels * (hi - lo) + lo)
    return out, meta
