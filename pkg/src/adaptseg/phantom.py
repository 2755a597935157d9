"""Deterministic synthetic BraTS-like cases.

Each lesion is an axis-aligned ellipsoid with concentric label shells:
ET in the core, an NCR ring, and an ED rim. Shell boundaries are given
as fractions of the ellipsoid's normalized radius. Overlapping lesions
resolve by label priority ET > NCR > ED.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .ensemble import RegionProbabilityMaps
from .nifti import SEQUENCES, CaseBundle
from .volume import ED, ET, NCR, LabelVolume, VoxelGrid, regions_from_labels

# Mean intensity per tissue class (background, NCR, ED, ET) for each sequence.
DEFAULT_INTENSITIES = {
    "t1": (400.0, 250.0, 330.0, 380.0),
    "t1ce": (420.0, 260.0, 400.0, 820.0),
    "t2": (500.0, 900.0, 780.0, 650.0),
    "flair": (380.0, 520.0, 760.0, 600.0),
}


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: tuple = (48, 48, 40)
    spacing: tuple = (1.0, 1.0, 1.0)
    n_lesions: int = 1
    radius_range: tuple = (6.0, 10.0)  # semi-axis lengths, mm
    et_fraction: float = 0.35  # ET where normalized radius < et_fraction
    ncr_fraction: float = 0.6  # NCR ring up to ncr_fraction, ED rim up to 1
    intensities: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    tissue_sigma: float = 20.0
    noise_sigma: float = 10.0
    prob_models: tuple = ()  # model names that receive synthetic probability maps
    prob_blur: float = 1.0  # Gaussian sigma (voxels) applied to one-hot regions
    prob_noise: float = 0.05
    n_spurious: int = 1  # false-positive blobs per model map
    spurious_radius: float = 1.5  # voxels

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValueError("dims must be 3 positive integers")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be 3 positive numbers")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError("radius range must satisfy 0 < low <= high")
        if not 0 <= self.et_fraction <= self.ncr_fraction <= 1:
            raise ValueError("shell fractions must satisfy 0 <= et <= ncr <= 1")
        if self.n_lesions < 0:
            raise ValueError("n_lesions must be non-negative")


def _ellipsoid_radius(dims, spacing, center, radii) -> np.ndarray:
    """Normalized ellipsoidal radius of every voxel center (1 on the surface)."""
    axes = [(np.arange(n) - c) * s / r for n, c, s, r in zip(dims, center, spacing, radii)]
    return np.sqrt(axes[0][:, None, None] ** 2 + axes[1][None, :, None] ** 2 + axes[2][None, None, :] ** 2)


def ellipsoid_labels(spec: PhantomSpec, centers, radii) -> np.ndarray:
    labels = np.zeros(tuple(int(d) for d in spec.dims), dtype=np.uint8)
    for center, rad in zip(centers, radii):
        rho = _ellipsoid_radius(labels.shape, spec.spacing, center, rad)
        shell = np.zeros(labels.shape, dtype=np.uint8)
        shell[rho <= 1.0] = ED
        shell[rho < spec.ncr_fraction] = NCR
        shell[rho < spec.et_fraction] = ET
        # priority ET > NCR > ED; rank encodes it so a max() merges lesions
        rank = np.array([0, 2, 1, 3], dtype=np.uint8)
        merged = np.maximum(rank[labels], rank[shell])
        labels = np.array([0, 2, 1, 3], dtype=np.uint8)[merged]
    return labels


def _place_lesions(spec: PhantomSpec, rng: np.random.Generator):
    dims = np.array(spec.dims, dtype=float)
    spacing = np.array(spec.spacing, dtype=float)
    centers, radii = [], []
    for n in range(spec.n_lesions):
        rad = rng.uniform(*spec.radius_range, size=3)
        half = rad / spacing  # semi-axes in voxels
        lo, hi = half, dims - 1 - half
        if np.any(lo > hi):
            raise ValueError(f"lesion {n} with semi-axes {tuple(rad)} mm does not fit in dims {spec.dims}")
        centers.append(rng.uniform(lo, hi))
        radii.append(rad)
    return centers, radii


def _prob_maps(spec, labels, affine, model, rng) -> RegionProbabilityMaps:
    regions = regions_from_labels(labels)
    maps = []
    blobs = np.zeros(labels.shape, dtype=bool)
    for _ in range(spec.n_spurious):
        center = rng.uniform(0, np.array(labels.shape) - 1)
        r = spec.spurious_radius
        rho = _ellipsoid_radius(labels.shape, (1.0, 1.0, 1.0), center, (r, r, r))
        blobs |= rho <= 1.0
    for region in regions:
        p = ndimage.gaussian_filter(region.astype(float), spec.prob_blur) if spec.prob_blur > 0 else region.astype(float)
        p = p + rng.normal(0.0, spec.prob_noise, size=p.shape)
        p[blobs] = np.maximum(p[blobs], 0.9)
        maps.append(VoxelGrid(np.clip(p, 0.0, 1.0).astype(np.float32), affine))
    return RegionProbabilityMaps(*maps, model_name=model)


def generate(spec: PhantomSpec, case_id: str | None = None) -> CaseBundle:
    """Build a case fully determined by ``spec`` (including its seed)."""
    rng = np.random.default_rng(spec.seed)
    affine = np.diag([*map(float, spec.spacing), 1.0])
    centers, radii = _place_lesions(spec, rng)
    labels = ellipsoid_labels(spec, centers, radii)
    images = {}
    for seq in SEQUENCES:
        means = np.asarray(spec.intensities[seq], dtype=float)
        tissue = means[labels] + rng.normal(0.0, spec.tissue_sigma, size=len(means))[labels]
        img = tissue + rng.normal(0.0, spec.noise_sigma, size=labels.shape)
        images[seq] = VoxelGrid(img.astype(np.float32), affine)
    prob_maps = {m: _prob_maps(spec, labels, affine, m, rng) for m in spec.prob_models}
    return CaseBundle(
        case_id=case_id or f"PHANTOM-{spec.seed:05d}",
        labels=LabelVolume(labels, affine),
        prob_maps=prob_maps,
        **images,
    )


def corpus_specs(n_cases: int, seed: int = 0, **overrides) -> list:
    """Specs for a corpus of ``n_cases`` with 1-3 lesions each."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_cases):
        kw = {"seed": int(rng.integers(2 ** 31)), "n_lesions": int(rng.integers(1, 4))}
        kw.update(overrides)
        specs.append(PhantomSpec(**kw))
    return specs
