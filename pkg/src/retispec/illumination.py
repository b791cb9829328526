"""Order-2 spherical-harmonic lighting: reflectance basis, least-squares
coefficient fitting under a fixed texture, ambient/direct separation, and
an iterative PCA-texture baseline fit used for speed comparisons.

The shading model fitted here is I[p] ~= (h(n_p) . gamma) * T[p] per
channel, where h is the 9-term real SH basis evaluated at the pixel normal
and T is a strictly positive texture (albedo) map.
"""

import time
from dataclasses import dataclass

import numpy as np

from .raster import Raster
from .shading import sample_uv_texture

__all__ = [
    "SH_C0", "SH_C1", "SH_C2", "SH_C3", "SH_C4",
    "FitError",
    "SHCoefficients",
    "sh_basis",
    "fit_sh_coefficients",
    "split_ambient_direct",
    "PCATextureBasis",
    "make_pca_texture_basis",
    "fit_pca_texture_baseline",
]

SH_C0 = 0.28209479
SH_C1 = 0.48860251
SH_C2 = 1.09254843
SH_C3 = 0.31539157
SH_C4 = 0.54627422

_COND_LIMIT = 1e12


class FitError(ValueError):
    """Raised when a lighting fit is singular or fails to converge."""


@dataclass
class SHCoefficients:
    """9 x C radiance weights, one column per image channel."""

    gamma: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if self.gamma.ndim == 1:
            self.gamma = self.gamma[:, None]
        if self.gamma.shape[0] != 9 or not np.all(np.isfinite(self.gamma)):
            raise FitError("gamma must be a finite 9 x C array")

    @property
    def channels(self):
        return self.gamma.shape[1]

    def to_list(self):
        return self.gamma.tolist()

    @classmethod
    def from_list(cls, rows):
        return cls(np.asarray(rows, dtype=np.float64))


def sh_basis(normals):
    """Evaluate the 9-term order-2 real SH basis at unit normals.

    Accepts (3,) or (..., 3); returns (9,) or (..., 9) with component order
    1, y, z, x, xy, yz, 3z^2 - 1, xz, x^2 - y^2.
    """
    n = np.asarray(normals, dtype=np.float64)
    single = n.ndim == 1
    n = np.atleast_2d(n)
    lens = np.linalg.norm(n, axis=-1)
    if np.any(np.abs(lens - 1.0) > 1e-6):
        raise ValueError("sh_basis requires unit normals (|n| = 1 within 1e-6)")
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    h = np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ], axis=-1)
    return h[0] if single else h


def _masked_design(image, texture, buffers):
    mask = buffers.mask
    if int(mask.sum()) < 9:
        raise FitError("need at least 9 masked pixels to fit 9 coefficients")
    tex = texture.pixels[mask]
    if np.any(tex <= 0.0):
        raise FitError("texture must be strictly positive under the mask")
    img = image.pixels[mask]
    if img.shape != tex.shape:
        raise FitError("image and texture channel counts differ")
    basis = sh_basis(buffers.normal_map[mask])
    return img, tex, basis


def _solve_gamma(img, tex, basis):
    """Per-channel normal-equations solve of gamma given pixel samples."""
    channels = img.shape[1]
    gamma = np.empty((9, channels))
    for c in range(channels):
        a = basis * tex[:, c : c + 1]
        m = a.T @ a
        if np.linalg.cond(m) > _COND_LIMIT:
            raise FitError("singular fit: normal matrix condition number > 1e12")
        gamma[:, c] = np.linalg.solve(m, a.T @ img[:, c])
    return gamma


def fit_sh_coefficients(image, texture, buffers, robust=False, trim_fraction=0.10):
    """Least-squares gamma minimizing sum over masked pixels of
    (I_c - (h(n_p) . gamma_c) * T_c)^2, independently per channel.

    With robust=True a single re-fit runs after discarding the
    trim_fraction of pixels with the largest positive mean residual
    (specular suppression).  trim_fraction = 0 reproduces the plain fit
    bit for bit.
    """
    if not 0.0 <= float(trim_fraction) < 1.0:
        raise FitError("trim_fraction must be in [0, 1)")
    img, tex, basis = _masked_design(image, texture, buffers)
    gamma = _solve_gamma(img, tex, basis)
    if robust:
        k = int(np.floor(float(trim_fraction) * img.shape[0]))
        if k > 0:
            pred = (basis @ gamma) * tex
            resid = np.mean(img - pred, axis=1)
            order = np.argsort(resid, kind="stable")
            worst = order[-k:]
            drop = worst[resid[worst] > 0.0]
            if drop.size:
                keep = np.ones(img.shape[0], dtype=bool)
                keep[drop] = False
                gamma = _solve_gamma(img[keep], tex[keep], basis[keep])
    return SHCoefficients(gamma)


def split_ambient_direct(coeffs, buffers, clamp=True):
    """Split the fitted radiance into its isotropic and directional parts.

    ambient_map[p] = h_1 * gamma_row1 (a constant per channel under the
    mask); direct_map[p] = sum of the 8 directional terms.  With clamp on,
    negative direct values are floored at 0 (display path); the unclamped
    split partitions (h . gamma) exactly.
    """
    mask = buffers.mask
    channels = coeffs.channels
    ambient_rgb = SH_C0 * coeffs.gamma[0]
    ambient = np.zeros(mask.shape + (channels,))
    ambient[mask] = ambient_rgb
    basis = sh_basis(buffers.normal_map[mask])
    direct_vals = basis[:, 1:] @ coeffs.gamma[1:]
    if clamp:
        direct_vals = np.maximum(direct_vals, 0.0)
    direct = np.zeros(mask.shape + (channels,))
    direct[mask] = direct_vals
    return Raster(ambient), Raster(direct)


# ---------------------------------------------------------------------------
# PCA texture baseline (alternating least squares)
# ---------------------------------------------------------------------------

@dataclass
class PCATextureBasis:
    """Per-texel mean texture plus K orthonormal texel-space directions."""

    mean: np.ndarray   # (R, R, C)
    axes: np.ndarray   # (K, R, R, C), mutually orthonormal as flat vectors

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.axes = np.asarray(self.axes, dtype=np.float64)
        if self.axes.ndim != 4 or self.axes.shape[1:] != self.mean.shape:
            raise ValueError("axes must be (K,) + mean.shape")
        k = self.axes.shape[0]
        if k:
            flat = self.axes.reshape(k, -1)
            gram = flat @ flat.T
            if not np.allclose(gram, np.eye(k), atol=1e-10):
                raise ValueError("axes must be orthonormal within 1e-10")

    @property
    def k(self):
        return self.axes.shape[0]

    def texture(self, beta):
        beta = np.asarray(beta, dtype=np.float64)
        out = self.mean.copy()
        if self.k:
            out += np.tensordot(beta, self.axes, axes=(0, 0))
        return Raster(out)


def make_pca_texture_basis(uv_resolution=128, channels=3, k=16, seed=0):
    """Synthetic orthonormal texture basis: smooth random fields through QR."""
    rng = np.random.default_rng(seed)
    r = int(uv_resolution)
    yy, xx = np.meshgrid(np.linspace(0, 1, r), np.linspace(0, 1, r), indexing="ij")
    mean = np.empty((r, r, channels))
    for c in range(channels):
        mean[..., c] = 0.55 + 0.1 * np.sin(2 * np.pi * (xx + 0.3 * c)) * np.cos(
            np.pi * yy)
    if k == 0:
        return PCATextureBasis(mean=mean, axes=np.zeros((0, r, r, channels)))
    fields = np.empty((k, r * r * channels))
    for i in range(k):
        freq_x = rng.integers(1, 6)
        freq_y = rng.integers(1, 6)
        phase = rng.uniform(0, 2 * np.pi, size=channels)
        f = np.stack([
            np.sin(2 * np.pi * freq_x * xx + phase[c]) *
            np.cos(2 * np.pi * freq_y * yy + 0.5 * phase[c])
            for c in range(channels)
        ], axis=-1)
        f += 0.05 * rng.standard_normal(f.shape)
        fields[i] = f.ravel()
    q, _ = np.linalg.qr(fields.T)
    axes = q.T.reshape(k, r, r, channels)
    return PCATextureBasis(mean=mean, axes=axes)


def fit_pca_texture_baseline(image, buffers, basis, max_iters=10, tol=1e-6):
    """Alternating least squares over (gamma, beta) for
    I ~= (H gamma) * (mean + sum_k beta_k axes_k), textures sampled from UV
    space through the UV map.

    Each iteration solves gamma with the texture fixed, then beta with
    gamma fixed (the model is linear in each block).  Stops at max_iters or
    when the relative residual change drops below tol; raises FitError if
    the residual increases three iterations in a row.  Returns a dict with
    gamma, beta, residuals per iteration, and wall_time seconds.
    """
    t0 = time.perf_counter()
    mask = buffers.mask
    img = image.pixels[mask]
    uv = buffers.uv_map[mask]
    h = sh_basis(buffers.normal_map[mask])
    mean_pix = sample_uv_texture(Raster(basis.mean), uv)
    if basis.k:
        axes_pix = np.stack([
            sample_uv_texture(Raster(basis.axes[i]), uv) for i in range(basis.k)
        ])  # (K, P, C)
    beta = np.zeros(basis.k)
    residuals = []
    gamma = None
    rises = 0
    for _ in range(int(max_iters)):
        tex_pix = mean_pix if not basis.k else (
            mean_pix + np.tensordot(beta, axes_pix, axes=(0, 0)))
        gamma = _solve_gamma(img, tex_pix, h)
        if basis.k:
            shade_pix = h @ gamma  # (P, C)
            target = (img - shade_pix * mean_pix).ravel()
            design = (axes_pix * shade_pix).reshape(basis.k, -1).T
            beta, *_ = np.linalg.lstsq(design, target, rcond=None)
            tex_pix = mean_pix + np.tensordot(beta, axes_pix, axes=(0, 0))
        r = float(np.linalg.norm(img - (h @ gamma) * tex_pix))
        if residuals:
            prev = residuals[-1]
            rises = rises + 1 if r > prev * (1.0 + 1e-12) else 0
            if rises >= 3:
                raise FitError("alternating fit diverged: residual rose 3 times")
            if prev > 0 and abs(prev - r) / prev < tol:
                residuals.append(r)
                break
        residuals.append(r)
    return {
        "gamma": SHCoefficients(gamma),
        "beta": beta,
        "residuals": residuals,
        "wall_time": time.perf_counter() - t0,
    }
