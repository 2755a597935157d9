"""Intensity discretization and first-order statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._validation import check_mask, check_same_shape

FIRST_ORDER_NAMES = (
    "Energy", "TotalEnergy", "Entropy", "Minimum", "10Percentile", "90Percentile",
    "Maximum", "Mean", "Median", "InterquartileRange", "Range", "MeanAbsoluteDeviation",
    "RobustMeanAbsoluteDeviation", "RootMeanSquared", "Skewness", "Kurtosis",
    "Variance", "Uniformity",
)


@dataclass(frozen=True, eq=False)
class DiscretizedImage:
    """Gray-level bins (1..n_bins inside the mask, 0 outside)."""

    bins: np.ndarray
    n_bins: int
    bin_width: float


def _image_and_mask(image, mask):
    img = np.asarray(getattr(image, "data", image), dtype=float)
    m = check_mask(mask)
    check_same_shape(img, m, names=("image", "mask"))
    if not m.any():
        raise ValueError("empty mask")
    return img, m


def discretize(image, mask, bin_width: float = 25.0) -> DiscretizedImage:
    """Fixed-bin-width binning anchored at the minimum inside the mask."""
    if not bin_width > 0:
        raise ValueError(f"bin_width must be positive, got {bin_width}")
    img, m = _image_and_mask(image, mask)
    values = img[m]
    bins = np.zeros(img.shape, dtype=np.int64)
    bins[m] = np.floor((values - values.min()) / bin_width).astype(np.int64) + 1
    return DiscretizedImage(bins=bins, n_bins=int(bins.max()), bin_width=float(bin_width))


def first_order_features(image, mask, bin_width: float = 25.0, voxel_volume: float | None = None) -> dict:
    """The 18 first-order statistics, keyed by name.

    ``voxel_volume`` defaults to the spacing product of ``image`` when it
    is a :class:`~adaptseg.volume.VoxelGrid`, else 1.
    """
    img, m = _image_and_mask(image, mask)
    if voxel_volume is None:
        spacing = getattr(image, "spacing", None)
        voxel_volume = float(np.prod(spacing)) if spacing is not None else 1.0
    x = img[m]
    n = x.size
    mean = x.mean()
    dev = x - mean
    m2 = np.mean(dev ** 2)
    if m2 > 0:
        skew = np.mean(dev ** 3) / m2 ** 1.5
        kurt = np.mean(dev ** 4) / m2 ** 2
    else:
        skew = kurt = 0.0
    p10, p25, p50, p75, p90 = np.percentile(x, [10, 25, 50, 75, 90])
    robust = x[(x >= p10) & (x <= p90)]
    energy = float(np.sum(x ** 2))

    bins = discretize(img, m, bin_width).bins[m]
    p = np.bincount(bins)[1:] / n
    p = p[p > 0]
    return {
        "Energy": energy,
        "TotalEnergy": energy * voxel_volume,
        "Entropy": float(-np.sum(p * np.log2(p))) if p.size > 1 else 0.0,
        "Minimum": float(x.min()),
        "10Percentile": float(p10),
        "90Percentile": float(p90),
        "Maximum": float(x.max()),
        "Mean": float(mean),
        "Median": float(p50),
        "InterquartileRange": float(p75 - p25),
        "Range": float(x.max() - x.min()),
        "MeanAbsoluteDeviation": float(np.mean(np.abs(dev))),
        "RobustMeanAbsoluteDeviation": float(np.mean(np.abs(robust - robust.mean()))),
        "RootMeanSquared": float(np.sqrt(energy / n)),
        "Skewness": float(skew),
        "Kurtosis": float(kurt),
        "Variance": float(m2),
        "Uniformity": float(np.sum(p ** 2)),
    }
