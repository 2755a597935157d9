"""Volume types, label/region conversion, connected components and dilation.

Arrays are indexed ``[i, j, k]`` in NIfTI voxel order (``i`` varies fastest
on disk). In memory, linear voxel indices are C order over ``[i, j, k]``,
so ``linear = (i * nj + j) * nk + k``. Component ids are assigned in
ascending order of each component's smallest linear index.

Label integers follow the BraTS 2023 convention: 1 = necrotic core (NCR),
2 = peritumoral edema (ED), 3 = enhancing tumor (ET).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from ._validation import check_connectivity, check_labels, check_mask, check_same_shape

NCR, ED, ET = 1, 2, 3
LABELS = (NCR, ED, ET)
REGIONS = ("ET", "TC", "WT")

_RANK = {6: 1, 18: 2, 26: 3}


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Scalar volume plus its voxel-to-world affine (mm).

    Spacing is derived from the column norms of the affine's 3x3 block, so
    the two can never disagree. ``data`` is stored read-only.
    """

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or 0 in data.shape:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        affine = np.asarray(self.affine, dtype=float)
        if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
            raise ValueError("affine must be a finite 4x4 matrix")
        if np.any(np.linalg.norm(affine[:3, :3], axis=0) <= 0):
            raise ValueError("affine columns must have positive norm (spacing)")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "affine", _readonly(affine))

    @classmethod
    def from_spacing(cls, data, spacing=(1.0, 1.0, 1.0)):
        return cls(data, np.diag([*map(float, spacing), 1.0]))

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    def same_geometry(self, other: "VoxelGrid", atol: float = 1e-4) -> bool:
        return self.dims == other.dims and np.allclose(self.affine, other.affine, rtol=0, atol=atol)

    def with_data(self, data):
        """New volume of the same class and geometry holding ``data``."""
        return type(self)(data, self.affine)


class LabelVolume(VoxelGrid):
    """Segmentation volume restricted to labels {0, 1, 2, 3}, stored as uint8."""

    def __post_init__(self):
        object.__setattr__(self, "data", check_labels(self.data))
        super().__post_init__()


class RegionMasks(NamedTuple):
    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray

    def as_dict(self) -> dict:
        return {"ET": self.et, "TC": self.tc, "WT": self.wt}


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    labels: np.ndarray
    sizes: np.ndarray
    connectivity: int

    @property
    def n_components(self) -> int:
        return len(self.sizes)


def regions_from_labels(labels) -> RegionMasks:
    """Nested ET ⊆ TC ⊆ WT masks of a label volume."""
    lab = check_labels(labels)
    return RegionMasks(et=lab == ET, tc=(lab == NCR) | (lab == ET), wt=lab > 0)


def labels_from_regions(regions) -> np.ndarray:
    """Decode region masks to labels; inner regions win on inconsistent voxels.

    Accepts a :class:`RegionMasks` or any ``(et, tc, wt)`` triple.
    """
    et, tc, wt = (check_mask(m, n) for m, n in zip(regions, ("et", "tc", "wt")))
    check_same_shape(et, tc, wt, names=("et", "tc", "wt"))
    out = np.zeros(et.shape, dtype=np.uint8)
    out[wt] = ED
    out[tc] = NCR
    out[et] = ET
    return out


def structuring_element(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(3, _RANK[check_connectivity(connectivity)])


def connected_components(mask, connectivity: int = 26) -> ComponentLabeling:
    m = check_mask(mask)
    labels, n = ndimage.label(m, structure=structuring_element(connectivity))
    # ndimage scans in C order, so ids already follow the smallest linear index.
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return ComponentLabeling(labels=labels, sizes=sizes.astype(np.int64), connectivity=connectivity)


def remove_small_components(mask, min_voxels: int, connectivity: int = 26) -> np.ndarray:
    """Clear components with fewer than ``min_voxels`` voxels."""
    m = check_mask(mask)
    if min_voxels < 0:
        raise ValueError("min_voxels must be non-negative")
    if min_voxels == 0 or not m.any():
        return m.copy()
    cc = connected_components(m, connectivity)
    keep = np.concatenate([[False], cc.sizes >= min_voxels])
    return keep[cc.labels]


def dilate(mask, radius_voxels: int = 1, connectivity: int = 26) -> np.ndarray:
    m = check_mask(mask)
    if radius_voxels < 1:
        raise ValueError("radius_voxels must be a positive integer")
    if not m.any():
        return m.copy()
    return ndimage.binary_dilation(m, structure=structuring_element(connectivity), iterations=radius_voxels)
