"""Phong image formation on rasterized geometry buffers.

Per pixel with unit normal n, unit light direction l, unit view direction v,
texture (albedo) T, ambient color A, direct color D, and exponent p:

    C = A * T + max(<n, l>, 0) * D * T + max(<r, v>, 0)^p * D * T
    r = 2 <n, l> n - l

Colors multiply channelwise.  Both cosine factors are clamped at zero
independently; the specular term is not gated on <n, l>, so a surface can
show the mirror lobe even where the diffuse term has clamped to zero.
"""

from dataclasses import dataclass, field

import numpy as np

from .raster import Raster
from .validation import check_finite, check_unit_vector

__all__ = [
    "PhongParams",
    "reflect",
    "shade",
    "shade_pixel",
    "sample_uv_texture",
    "render_buffers",
    "render_scene",
    "ALL_COMPONENTS",
]

ALL_COMPONENTS = ("ambient", "diffuse", "specular")


@dataclass
class PhongParams:
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    view_dir: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    ambient: np.ndarray = field(default_factory=lambda: np.array([0.2, 0.2, 0.2]))
    direct: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.8, 0.8]))
    exponent: float = 16.0

    def __post_init__(self):
        self.light_dir = check_unit_vector(self.light_dir, "light_dir")
        self.view_dir = check_unit_vector(self.view_dir, "view_dir")
        self.ambient = np.atleast_1d(np.asarray(self.ambient, dtype=np.float64))
        self.direct = np.atleast_1d(np.asarray(self.direct, dtype=np.float64))
        check_finite(self.ambient, "ambient")
        check_finite(self.direct, "direct")
        if np.any(self.ambient < 0) or np.any(self.direct < 0):
            raise ValueError("light colors must be non-negative")
        self.exponent = float(self.exponent)
        if self.exponent <= 0:
            raise ValueError("exponent must be > 0")

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return PhongParams(**d)

    def to_dict(self):
        return {
            "light_dir": self.light_dir.tolist(),
            "view_dir": self.view_dir.tolist(),
            "ambient": self.ambient.tolist(),
            "direct": self.direct.tolist(),
            "exponent": self.exponent,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def reflect(normals, light_dir):
    """Mirror the light direction about the normal: r = 2<n,l>n - l."""
    n = np.asarray(normals, dtype=np.float64)
    l = np.asarray(light_dir, dtype=np.float64)
    ndotl = np.sum(n * l, axis=-1, keepdims=True)
    return 2.0 * ndotl * n - l


def _color_for(channels, color, what):
    color = np.atleast_1d(np.asarray(color, dtype=np.float64))
    if color.shape == (1,):
        color = np.repeat(color, channels)
    if color.shape != (channels,):
        raise ValueError(f"{what} must have {channels} channels, got {color.shape}")
    return color


def shade(normals, texture, params, components=ALL_COMPONENTS):
    """Evaluate the shading model on an array of normals.

    normals: (..., 3) unit vectors; texture: (..., C) albedo.  Returns
    (..., C).  `components` selects any subset of ("ambient", "diffuse",
    "specular"); the view direction is shared by all pixels (orthographic).
    """
    n = np.asarray(normals, dtype=np.float64)
    t = np.asarray(texture, dtype=np.float64)
    unknown = set(components) - set(ALL_COMPONENTS)
    if unknown:
        raise ValueError(f"unknown shading components: {sorted(unknown)}")
    channels = t.shape[-1]
    amb = _color_for(channels, params.ambient, "ambient")
    dirc = _color_for(channels, params.direct, "direct")
    l = params.light_dir
    v = params.view_dir

    out = np.zeros(np.broadcast_shapes(n.shape[:-1], t.shape[:-1]) + (channels,))
    if "ambient" in components:
        out = out + amb * t
    if "diffuse" in components:
        ndotl = np.maximum(np.sum(n * l, axis=-1, keepdims=True), 0.0)
        out = out + ndotl * dirc * t
    if "specular" in components:
        r = reflect(n, l)
        rdotv = np.maximum(np.sum(r * v, axis=-1, keepdims=True), 0.0)
        out = out + (rdotv ** params.exponent) * dirc * t
    return out


def shade_pixel(normal, texture_rgb, params):
    """Single-pixel convenience wrapper around shade().

    texture_rgb may be a scalar (one grey channel) or a length-C color.
    """
    normal = check_unit_vector(normal, "normal")
    tex = np.atleast_1d(np.asarray(texture_rgb, dtype=np.float64))
    return shade(normal, tex, params)


def sample_uv_texture(texture, uv_map):
    """Nearest-cell lookup of a UV texture image at (..., 2) coordinates.

    Uses the same cell convention as uv_flatten: u indexes columns left to
    right, v indexes rows bottom to top.
    """
    h, w = texture.height, texture.width
    uv = np.asarray(uv_map, dtype=np.float64)
    cols = np.minimum((np.clip(uv[..., 0], 0.0, 1.0) * w).astype(np.int64), w - 1)
    rows = np.minimum(((1.0 - np.clip(uv[..., 1], 0.0, 1.0)) * h).astype(np.int64),
                      h - 1)
    return texture.pixels[rows, cols]


def render_buffers(buffers, params, albedo=None, uv_texture=None,
                   components=ALL_COMPONENTS, background=0.0):
    """Shade rasterized geometry buffers into an image.

    Texture comes either from a constant `albedo` (length-C array) or from
    a `uv_texture` Raster sampled through the UV map; exactly one must be
    given.  Pixels outside the mask take the background value.
    """
    if (albedo is None) == (uv_texture is None):
        raise ValueError("provide exactly one of albedo or uv_texture")
    mask = buffers.mask
    if uv_texture is not None:
        tex = sample_uv_texture(uv_texture, buffers.uv_map[mask])
    else:
        tex = np.atleast_1d(np.asarray(albedo, dtype=np.float64))
        if tex.ndim != 1:
            raise ValueError("constant albedo must be a 1-d color")
        tex = np.broadcast_to(tex, (int(mask.sum()), tex.shape[0]))
    shaded = shade(buffers.normal_map[mask], tex, params, components=components)
    out = np.full(mask.shape + (shaded.shape[-1],), float(background))
    out[mask] = shaded
    return Raster(out)


def render_scene(mesh, camera, width, height, params, albedo=None,
                 uv_texture=None, components=ALL_COMPONENTS):
    """Rasterize a mesh and shade it in one step.

    The camera's view direction should normally match params.view_dir;
    they are kept separate so mismatched configurations remain expressible.
    Returns (image, buffers).
    """
    from .geometry import rasterize

    buffers = rasterize(mesh, camera, width, height)
    image = render_buffers(buffers, params, albedo=albedo,
                           uv_texture=uv_texture, components=components)
    return image, buffers
