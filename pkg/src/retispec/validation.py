"""Input validation helpers shared across the package."""

import numpy as np

__all__ = [
    "check_finite",
    "check_image_array",
    "check_unit_vector",
    "check_unit_vectors",
    "check_positive",
]


def check_finite(arr, name="array"):
    """Raise ValueError if `arr` contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_image_array(arr, name="image"):
    """Coerce to a float64 (H, W, C) array with C in {1, 3}."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be 2-D or 3-D, got shape {arr.shape}")
    if arr.shape[2] not in (1, 3):
        raise ValueError(f"{name} must have 1 or 3 channels, got {arr.shape[2]}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} has empty spatial extent {arr.shape[:2]}")
    check_finite(arr, name)
    return arr


def check_unit_vector(v, name="vector", tol=1e-6):
    v = np.asarray(v, dtype=np.float64).reshape(3)
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > tol:
        raise ValueError(f"{name} must be unit length (|{name}| = {n:.8g})")
    return v


def check_unit_vectors(vs, name="vectors", tol=1e-6):
    vs = np.asarray(vs, dtype=np.float64)
    norms = np.linalg.norm(vs, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= tol):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"{name} must be unit length (max deviation {worst:.3g})")
    return vs


def check_positive(x, name="value"):
    if not x > 0:
        raise ValueError(f"{name} must be > 0, got {x}")
    return x
