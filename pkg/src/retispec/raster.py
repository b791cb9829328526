"""Image container, deterministic PPM/PNG I/O, separable Gaussian filtering,
and log-domain arithmetic.

All derived maps in the pipeline are float64 rasters; photographs are loaded
into the nominal [0, 1] range.  Gaussian blurring uses a truncated kernel of
radius ceil(3*sigma), renormalized to sum to 1, with mirror (reflect-without
-edge-repeat) boundary handling.
"""

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import convolve1d
from scipy.signal import fftconvolve

from .validation import check_image_array, check_positive

__all__ = [
    "Raster",
    "GaussianSpec",
    "RasterIOError",
    "load_raster",
    "save_raster",
    "gaussian_blur",
    "log_map",
    "exp_map",
]

# Direct separable convolution below this kernel length, FFT above.  Both
# paths compute the identical sum; FFT keeps large-sigma MSR scales cheap.
_FFT_KERNEL_THRESHOLD = 64


class RasterIOError(IOError):
    """Raised for missing files, malformed headers, or unsupported encodings."""


@dataclass(frozen=True)
class Raster:
    """An H x W x C float64 image plane (C is 1 or 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", check_image_array(self.pixels, "Raster"))

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    @property
    def shape(self):
        return self.pixels.shape

    @classmethod
    def constant(cls, height, width, channels, value=0.0):
        return cls(np.full((height, width, channels), float(value)))


@dataclass(frozen=True)
class GaussianSpec:
    """Truncated Gaussian kernel: radius = ceil(3*sigma), mirror boundary."""

    sigma: float

    def __post_init__(self):
        check_positive(self.sigma, "sigma")

    @property
    def radius(self):
        return int(math.ceil(3.0 * self.sigma))

    def kernel(self):
        x = np.arange(-self.radius, self.radius + 1, dtype=np.float64)
        w = np.exp(-(x * x) / (2.0 * self.sigma * self.sigma))
        return w / w.sum()


def _to_bytes(pixels, clamp):
    if clamp:
        pixels = np.clip(pixels, 0.0, 1.0)
    elif pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValueError("samples outside [0, 1]; pass clamp=True to clip")
    # round-half-up quantization
    return np.floor(pixels * 255.0 + 0.5).astype(np.uint8)


def _detect_format(path, fmt):
    if fmt is not None:
        f = fmt.upper()
        if f not in ("PPM", "PNG"):
            raise ValueError(f"unsupported format {fmt!r}")
        return f
    p = str(path).lower()
    if p.endswith(".ppm"):
        return "PPM"
    if p.endswith(".png"):
        return "PNG"
    raise ValueError(f"cannot infer format from {path!r}; pass format=")


def _read_ppm(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise RasterIOError(f"no such file: {path}")
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # '#' comments allowed between tokens
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(blob):
        c = blob[i : i + 1]
        if c == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j : j + 1].isspace():
                j += 1
            tokens.append(blob[i:j])
            i = j
    if len(tokens) < 4 or tokens[0] != b"P6":
        raise RasterIOError(f"malformed PPM header in {path}")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise RasterIOError(f"malformed PPM header in {path}")
    if width <= 0 or height <= 0:
        raise RasterIOError(f"bad PPM dimensions in {path}")
    if maxval != 255:
        raise RasterIOError(f"unsupported PPM bit depth (maxval={maxval}) in {path}")
    i += 1  # single whitespace byte after maxval
    data = blob[i : i + width * height * 3]
    if len(data) != width * height * 3:
        raise RasterIOError(f"truncated PPM payload in {path}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
    return arr


def _read_png(path):
    try:
        img = Image.open(path)
    except FileNotFoundError:
        raise RasterIOError(f"no such file: {path}")
    except Exception as exc:
        raise RasterIOError(f"cannot decode PNG {path}: {exc}")
    if img.format != "PNG":
        raise RasterIOError(f"{path} is not a PNG file")
    if img.mode not in ("L", "RGB"):
        raise RasterIOError(
            f"unsupported PNG mode {img.mode!r} in {path} (8-bit L or RGB only)"
        )
    arr = np.asarray(img, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_raster(path, fmt=None):
    """Load an 8-bit PPM (P6) or PNG into [0, 1] samples."""
    f = _detect_format(path, fmt)
    arr = _read_ppm(path) if f == "PPM" else _read_png(path)
    return Raster(arr.astype(np.float64) / 255.0)


def save_raster(image, path, fmt=None, clamp=False):
    """Write an 8-bit PPM or PNG; byte output is deterministic per input."""
    f = _detect_format(path, fmt)
    data = _to_bytes(image.pixels, clamp)
    if f == "PPM":
        if image.channels != 3:
            raise ValueError("PPM (P6) requires 3 channels")
        header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
        try:
            with open(path, "wb") as fh:
                fh.write(header)
                fh.write(data.tobytes())
        except OSError as exc:
            raise RasterIOError(f"cannot write {path}: {exc}")
    else:
        pil = Image.fromarray(data[:, :, 0] if image.channels == 1 else data)
        try:
            pil.save(path, format="PNG")
        except OSError as exc:
            raise RasterIOError(f"cannot write {path}: {exc}")


def mirror_indices(n, pad):
    """Index map extending [0, n) by `pad` on both sides, mirrored without
    repeating the edge sample.  Valid for any pad (reflects repeatedly)."""
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m >= n, period - m, m)


def _blur_axis(arr, kernel, axis):
    if kernel.size <= _FFT_KERNEL_THRESHOLD:
        return convolve1d(arr, kernel, axis=axis, mode="mirror")
    pad = kernel.size // 2
    idx = mirror_indices(arr.shape[axis], pad)
    ext = np.take(arr, idx, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = kernel.size
    return fftconvolve(ext, kernel.reshape(shape), mode="valid", axes=axis)


def gaussian_blur(image, spec):
    """Separable Gaussian blur (horizontal then vertical), mirror boundary."""
    if not isinstance(spec, GaussianSpec):
        spec = GaussianSpec(float(spec))
    k = spec.kernel()
    out = _blur_axis(image.pixels, k, axis=1)
    out = _blur_axis(out, k, axis=0)
    return Raster(out)


def log_map(image, epsilon=1e-4):
    """Per-sample ln(max(v, epsilon))."""
    check_positive(epsilon, "epsilon")
    return Raster(np.log(np.maximum(image.pixels, epsilon)))


def exp_map(image):
    """Per-sample exp; inverse of log_map on positive inputs."""
    return Raster(np.exp(image.pixels))
