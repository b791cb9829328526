"""Single- and multi-scale Retinex log-albedo extraction.

The observed image is modeled as illumination times albedo; taking logs turns
the product into a difference, and a Gaussian low-pass stands in for the
smooth illumination field.  Averaging the single-scale outputs over several
kernel widths balances global against local illumination removal.  The scale
defaults are [15, 80, 120] pixels.

Later pipeline stages divide and multiply by the texture, so the log-domain
output is also exposed as a strictly positive albedo map via a per-channel
exp-minmax normalization.
"""

from dataclasses import dataclass, field

import numpy as np

from .raster import GaussianSpec, Raster, gaussian_blur, log_map
from .validation import check_positive

__all__ = [
    "DEFAULT_SIGMAS",
    "TEXTURE_FLOOR",
    "RetinexConfig",
    "TextureMap",
    "single_scale_retinex",
    "multi_scale_retinex",
    "normalize_texture",
]

DEFAULT_SIGMAS = (15.0, 80.0, 120.0)

# Lower bound of the normalized albedo map; keeps every later division safe.
TEXTURE_FLOOR = 1e-3


@dataclass(frozen=True)
class RetinexConfig:
    sigmas: tuple = DEFAULT_SIGMAS
    epsilon: float = 1e-4
    normalization: str = "exp-minmax"

    def __post_init__(self):
        sigmas = tuple(float(s) for s in self.sigmas)
        if not sigmas:
            raise ValueError("sigmas must be non-empty")
        if any(s <= 0 for s in sigmas):
            raise ValueError("sigmas must all be > 0")
        if any(b <= a for a, b in zip(sigmas, sigmas[1:])):
            raise ValueError("sigmas must be strictly increasing")
        check_positive(self.epsilon, "epsilon")
        if self.normalization not in ("exp-minmax", "none"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        object.__setattr__(self, "sigmas", sigmas)

    def to_dict(self):
        return {
            "sigmas": list(self.sigmas),
            "epsilon": self.epsilon,
            "normalization": self.normalization,
        }


@dataclass(frozen=True)
class TextureMap:
    """Log-domain Retinex output plus its positive multiplicative form."""

    log_albedo: Raster
    albedo: Raster


def single_scale_retinex(image, sigma, epsilon=1e-4):
    """log(image) - log(blur(image, sigma)), per channel."""
    blurred = gaussian_blur(image, GaussianSpec(float(sigma)))
    out = log_map(image, epsilon).pixels - log_map(blurred, epsilon).pixels
    return Raster(out)


def multi_scale_retinex(image, config=None):
    """Average of single-scale outputs over config.sigmas."""
    config = config or RetinexConfig()
    acc = np.zeros_like(image.pixels)
    for sigma in config.sigmas:
        acc += single_scale_retinex(image, sigma, config.epsilon).pixels
    log_albedo = Raster(acc / len(config.sigmas))
    albedo = normalize_texture(log_albedo, config.normalization)
    return TextureMap(log_albedo=log_albedo, albedo=albedo)


def normalize_texture(log_albedo, rule="exp-minmax"):
    """Map log-albedo to a strictly positive multiplicative texture.

    exp-minmax: a = exp(log_albedo), then each channel is affinely mapped to
    [TEXTURE_FLOOR, 1] using that channel's min/max; a constant channel maps
    to 1.  "none" returns exp(log_albedo) unchanged.
    """
    a = np.exp(log_albedo.pixels)
    if rule == "none":
        return Raster(a)
    if rule != "exp-minmax":
        raise ValueError(f"unknown normalization {rule!r}")
    out = np.empty_like(a)
    for c in range(a.shape[2]):
        lo = a[:, :, c].min()
        hi = a[:, :, c].max()
        if hi - lo <= 0.0:
            out[:, :, c] = 1.0
        else:
            out[:, :, c] = TEXTURE_FLOOR + (a[:, :, c] - lo) * (
                (1.0 - TEXTURE_FLOOR) / (hi - lo)
            )
    return Raster(out)
