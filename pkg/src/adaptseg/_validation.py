"""Input validation helpers shared by the pipeline stages."""

from __future__ import annotations

import numpy as np

CONNECTIVITIES = (6, 18, 26)


def check_mask(mask, name: str = "mask") -> np.ndarray:
    """Return ``mask`` as a 3D boolean array or raise ``ValueError``."""
    arr = np.asarray(getattr(mask, "data", mask))
    if arr.ndim != 3:
        raise ValueError(f"{name} must be 3D, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.issubdtype(arr.dtype, np.number):
            raise ValueError(f"{name} must be boolean or numeric, got {arr.dtype}")
        arr = arr != 0
    return arr


def check_labels(labels, name: str = "labels") -> np.ndarray:
    """Return ``labels`` as a 3D uint8 array with values in {0, 1, 2, 3}."""
    arr = np.asarray(getattr(labels, "data", labels))
    if arr.ndim != 3:
        raise ValueError(f"{name} must be 3D, got shape {arr.shape}")
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValueError(f"{name} must hold integer values")
    elif arr.dtype.kind not in "iub":
        raise ValueError(f"{name} must be an integer array, got {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() > 3):
        raise ValueError(f"{name} values must lie in {{0, 1, 2, 3}}")
    return arr.astype(np.uint8, copy=False)


def check_same_shape(*arrays, names=None) -> tuple:
    shapes = [np.shape(getattr(a, "data", a)) for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ValueError(f"dimension mismatch between {label}: {shapes}")
    return shapes[0]


def check_connectivity(connectivity: int) -> int:
    if connectivity not in CONNECTIVITIES:
        raise ValueError(f"connectivity must be one of {CONNECTIVITIES}, got {connectivity!r}")
    return int(connectivity)


def check_spacing(spacing) -> np.ndarray:
    sp = np.asarray(spacing, dtype=float)
    if sp.shape != (3,):
        raise ValueError(f"spacing must have 3 components, got {sp.shape}")
    if not np.all(np.isfinite(sp)) or np.any(sp <= 0):
        raise ValueError(f"spacing must be strictly positive, got {tuple(sp)}")
    return sp


def check_table(X, name: str = "X", min_rows: int = 1) -> np.ndarray:
    """2D float table with at least ``min_rows`` rows (NaN allowed)."""
    arr = np.asarray(getattr(X, "values", X), dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {arr.shape[0]}")
    return arr
