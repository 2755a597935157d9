"""Texture matrices (GLCM, GLRLM, GLSZM, GLDM, NGTDM) and their features.

All matrices are built on the discretized image, cropped to the mask's
bounding box and padded by one voxel so that every neighbor of a masked
voxel is addressable by a fixed flat-index offset.

Conventions
-----------
* GLCM: symmetric, distance 1, one matrix per each of the 13 unique 3D
  directions; features are computed per direction and averaged over the
  directions that contain at least one voxel pair.
* GLRLM: 13 directions, features averaged over directions.
* GLSZM: zones are 26-connected groups of equal gray level.
* GLDM: 26-neighborhood, a neighbor is dependent when its gray level is
  equal to the center (alpha = 0); dependence counts the center voxel.
* NGTDM: 26-neighborhood restricted to the mask; voxels without any
  masked neighbor are skipped.
* Entropies use log2 with 0 * log(0) = 0. Features whose denominator
  vanishes take a fixed limit value instead of NaN.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy import ndimage

from .firstorder import DiscretizedImage, discretize

GLCM_NAMES = (
    "Autocorrelation", "JointAverage", "ClusterProminence", "ClusterShade", "ClusterTendency",
    "Contrast", "Correlation", "DifferenceAverage", "DifferenceEntropy", "DifferenceVariance",
    "JointEnergy", "JointEntropy", "Imc1", "Imc2", "Idm", "MCC", "Idmn", "Id", "Idn",
    "InverseVariance", "MaximumProbability", "SumAverage", "SumEntropy", "SumSquares",
)
GLRLM_NAMES = (
    "ShortRunEmphasis", "LongRunEmphasis", "GrayLevelNonUniformity",
    "GrayLevelNonUniformityNormalized", "RunLengthNonUniformity",
    "RunLengthNonUniformityNormalized", "RunPercentage", "GrayLevelVariance", "RunVariance",
    "RunEntropy", "LowGrayLevelRunEmphasis", "HighGrayLevelRunEmphasis",
    "ShortRunLowGrayLevelEmphasis", "ShortRunHighGrayLevelEmphasis",
    "LongRunLowGrayLevelEmphasis", "LongRunHighGrayLevelEmphasis",
)
GLSZM_NAMES = (
    "SmallAreaEmphasis", "LargeAreaEmphasis", "GrayLevelNonUniformity",
    "GrayLevelNonUniformityNormalized", "SizeZoneNonUniformity",
    "SizeZoneNonUniformityNormalized", "ZonePercentage", "GrayLevelVariance", "ZoneVariance",
    "ZoneEntropy", "LowGrayLevelZoneEmphasis", "HighGrayLevelZoneEmphasis",
    "SmallAreaLowGrayLevelEmphasis", "SmallAreaHighGrayLevelEmphasis",
    "LargeAreaLowGrayLevelEmphasis", "LargeAreaHighGrayLevelEmphasis",
)
GLDM_NAMES = (
    "SmallDependenceEmphasis", "LargeDependenceEmphasis", "GrayLevelNonUniformity",
    "DependenceNonUniformity", "DependenceNonUniformityNormalized", "GrayLevelVariance",
    "DependenceVariance", "DependenceEntropy", "LowGrayLevelEmphasis", "HighGrayLevelEmphasis",
    "SmallDependenceLowGrayLevelEmphasis", "SmallDependenceHighGrayLevelEmphasis",
    "LargeDependenceLowGrayLevelEmphasis", "LargeDependenceHighGrayLevelEmphasis",
)
NGTDM_NAMES = ("Coarseness", "Contrast", "Busyness", "Complexity", "Strength")

TEXTURE_FAMILIES = {
    "glcm": GLCM_NAMES,
    "glrlm": GLRLM_NAMES,
    "glszm": GLSZM_NAMES,
    "gldm": GLDM_NAMES,
    "ngtdm": NGTDM_NAMES,
}

# 13 direction vectors whose first non-zero component is positive.
DIRECTIONS = tuple(
    d for d in itertools.product((-1, 0, 1), repeat=3)
    if any(d) and next(c for c in d if c) > 0
)
NEIGHBORS = tuple(d for d in itertools.product((-1, 0, 1), repeat=3) if any(d))

COARSENESS_LIMIT = 1e6


class _Padded:
    """Discretized image cropped to the mask bounding box, padded, flattened."""

    def __init__(self, disc: DiscretizedImage):
        mask = disc.bins > 0
        lo = np.argwhere(mask).min(0)
        hi = np.argwhere(mask).max(0) + 1
        crop = disc.bins[tuple(slice(a, b) for a, b in zip(lo, hi))]
        padded = np.pad(crop, 1)
        self.shape = padded.shape
        self.gray = padded.ravel()
        self.mask = self.gray > 0
        self.idx = np.flatnonzero(self.mask)
        self.n_bins = disc.n_bins
        strides = np.array([self.shape[1] * self.shape[2], self.shape[2], 1])
        self.offset = {d: int(np.dot(d, strides)) for d in NEIGHBORS}


def _prepare(image, mask, bin_width) -> _Padded:
    if isinstance(image, DiscretizedImage):
        return _Padded(image)
    return _Padded(discretize(image, mask, bin_width))


# ---------------------------------------------------------------------------
# Matrix construction
# ---------------------------------------------------------------------------

def glcm_matrices(image, mask=None, bin_width: float = 25.0) -> np.ndarray:
    """Symmetric co-occurrence counts, shape (13, Ng, Ng)."""
    pad = _prepare(image, mask, bin_width)
    ng = pad.n_bins
    out = np.zeros((len(DIRECTIONS), ng, ng))
    for n, d in enumerate(DIRECTIONS):
        nb = pad.idx + pad.offset[d]
        ok = pad.mask[nb]
        i = pad.gray[pad.idx[ok]] - 1
        j = pad.gray[nb[ok]] - 1
        counts = np.bincount(i * ng + j, minlength=ng * ng).reshape(ng, ng)
        out[n] = counts + counts.T
    return out


def glrlm_matrices(image, mask=None, bin_width: float = 25.0):
    """Run-length counts, shape (13, Ng, max_run), and the masked voxel count."""
    pad = _prepare(image, mask, bin_width)
    ng = pad.n_bins
    max_run = max(pad.shape)
    out = np.zeros((len(DIRECTIONS), ng, max_run))
    for n, d in enumerate(DIRECTIONS):
        off = pad.offset[d]
        prev = pad.idx - off
        starts = pad.idx[~(pad.mask[prev] & (pad.gray[prev] == pad.gray[pad.idx]))]
        level = pad.gray[starts]
        length = np.ones(starts.size, dtype=np.int64)
        run = np.arange(starts.size)
        pos = starts.copy()
        while run.size:
            nxt = pos + off
            cont = pad.mask[nxt] & (pad.gray[nxt] == level[run])
            run, pos = run[cont], nxt[cont]
            length[run] += 1
        np.add.at(out[n], (level - 1, length - 1), 1)
    return out, pad.idx.size


def glszm_matrix(image, mask=None, bin_width: float = 25.0):
    """Size-zone counts, shape (Ng, max_zone), and the masked voxel count."""
    pad = _prepare(image, mask, bin_width)
    gray = pad.gray.reshape(pad.shape)
    structure = np.ones((3, 3, 3), dtype=bool)
    sizes, levels = [], []
    for level in range(1, pad.n_bins + 1):
        lab, nz = ndimage.label(gray == level, structure=structure)
        if nz:
            s = np.bincount(lab.ravel())[1:]
            sizes.append(s)
            levels.append(np.full(s.size, level))
    sizes = np.concatenate(sizes)
    levels = np.concatenate(levels)
    out = np.zeros((pad.n_bins, int(sizes.max())))
    np.add.at(out, (levels - 1, sizes - 1), 1)
    return out, pad.idx.size


def gldm_matrix(image, mask=None, bin_width: float = 25.0, alpha: float = 0.0) -> np.ndarray:
    """Dependence counts, shape (Ng, 27)."""
    pad = _prepare(image, mask, bin_width)
    center = pad.gray[pad.idx]
    dep = np.ones(pad.idx.size, dtype=np.int64)
    for d in NEIGHBORS:
        nb = pad.idx + pad.offset[d]
        dep += pad.mask[nb] & (np.abs(pad.gray[nb] - center) <= alpha)
    out = np.zeros((pad.n_bins, len(NEIGHBORS) + 1))
    np.add.at(out, (center - 1, dep - 1), 1)
    return out


def ngtdm_matrix(image, mask=None, bin_width: float = 25.0):
    """Per gray level (n_i, s_i) arrays of the neighborhood gray-tone difference."""
    pad = _prepare(image, mask, bin_width)
    center = pad.gray[pad.idx]
    total = np.zeros(pad.idx.size)
    count = np.zeros(pad.idx.size)
    for d in NEIGHBORS:
        nb = pad.idx + pad.offset[d]
        ok = pad.mask[nb]
        total += np.where(ok, pad.gray[nb], 0)
        count += ok
    valid = count > 0
    diff = np.abs(center[valid] - total[valid] / count[valid])
    n = np.bincount(center[valid] - 1, minlength=pad.n_bins).astype(float)
    s = np.bincount(center[valid] - 1, weights=diff, minlength=pad.n_bins)
    return n, s


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p))) + 0.0  # avoid -0.0


def _glcm_single(counts: np.ndarray, ng: int) -> dict:
    p = counts / counts.sum()
    lv = np.arange(1, ng + 1, dtype=float)
    i, j = np.meshgrid(lv, lv, indexing="ij")
    px, py = p.sum(1), p.sum(0)
    ux, uy = px @ lv, py @ lv
    sx = np.sqrt(px @ (lv - ux) ** 2)
    sy = np.sqrt(py @ (lv - uy) ** 2)
    absdiff = np.abs(i - j).astype(int)
    p_diff = np.bincount(absdiff.ravel(), weights=p.ravel(), minlength=ng)
    p_sum = np.bincount((i + j).astype(int).ravel(), weights=p.ravel(), minlength=2 * ng + 1)
    k_diff = np.arange(ng, dtype=float)
    k_sum = np.arange(2 * ng + 1, dtype=float)
    diff_avg = p_diff @ k_diff
    centred = i + j - ux - uy

    hx, hy, hxy = _entropy(px), _entropy(py), _entropy(p.ravel())
    outer = np.outer(px, py)
    nz = p > 0
    hxy1 = float(-np.sum(p[nz] * np.log2(outer[nz])))
    hxy2 = _entropy(outer.ravel())
    hmax = max(hx, hy)

    present = px > 0
    if present.sum() > 1:
        dh = 1 / np.sqrt(px[present])
        sym = dh[:, None] * p[np.ix_(present, present)] * dh[None, :]
        eig = np.sort(np.linalg.eigvalsh(sym) ** 2)[::-1]
        mcc = float(np.sqrt(max(eig[1], 0.0)))
    else:
        mcc = 1.0

    return {
        "Autocorrelation": float(np.sum(p * i * j)),
        "JointAverage": float(ux),
        "ClusterProminence": float(np.sum(centred ** 4 * p)),
        "ClusterShade": float(np.sum(centred ** 3 * p)),
        "ClusterTendency": float(np.sum(centred ** 2 * p)),
        "Contrast": float(np.sum((i - j) ** 2 * p)),
        "Correlation": float((np.sum(p * i * j) - ux * uy) / (sx * sy)) if sx * sy > 0 else 1.0,
        "DifferenceAverage": float(diff_avg),
        "DifferenceEntropy": _entropy(p_diff),
        "DifferenceVariance": float(p_diff @ (k_diff - diff_avg) ** 2),
        "JointEnergy": float(np.sum(p ** 2)),
        "JointEntropy": hxy,
        "Imc1": (hxy - hxy1) / hmax if hmax > 0 else 0.0,
        "Imc2": float(np.sqrt(max(0.0, 1.0 - np.exp(-2.0 * (hxy2 - hxy))))),
        "Idm": float(np.sum(p / (1 + (i - j) ** 2))),
        "MCC": mcc,
        "Idmn": float(np.sum(p / (1 + (i - j) ** 2 / ng ** 2))),
        "Id": float(np.sum(p / (1 + np.abs(i - j)))),
        "Idn": float(np.sum(p / (1 + np.abs(i - j) / ng))),
        "InverseVariance": float(p_diff[1:] @ (1 / k_diff[1:] ** 2)) if ng > 1 else 0.0,
        "MaximumProbability": float(p.max()),
        "SumAverage": float(p_sum @ k_sum),
        "SumEntropy": _entropy(p_sum),
        "SumSquares": float(np.sum((i - ux) ** 2 * p)),
    }


def glcm_features(matrices: np.ndarray) -> dict:
    ng = matrices.shape[1]
    per_dir = [_glcm_single(m, ng) for m in matrices if m.sum() > 0]
    if not per_dir:
        out = dict.fromkeys(GLCM_NAMES, 0.0)
        out["Correlation"] = out["MCC"] = 1.0
        return out
    return {name: float(np.mean([f[name] for f in per_dir])) for name in GLCM_NAMES}


def _zone_features(P: np.ndarray, n_voxels: int | None) -> dict:
    """Shared formulas of run-length, size-zone and dependence matrices.

    Rows index gray level, columns index run length / zone size /
    dependence count (both 1-based). Keys use the GLRLM vocabulary.
    """
    nz = P.sum()
    i = np.arange(1, P.shape[0] + 1, dtype=float)[:, None]
    j = np.arange(1, P.shape[1] + 1, dtype=float)[None, :]
    p = P / nz
    gl = P.sum(1)
    rl = P.sum(0)
    mu_i = float(np.sum(p * i))
    mu_j = float(np.sum(p * j))
    out = {
        "ShortRunEmphasis": float(np.sum(P / j ** 2) / nz),
        "LongRunEmphasis": float(np.sum(P * j ** 2) / nz),
        "GrayLevelNonUniformity": float(np.sum(gl ** 2) / nz),
        "GrayLevelNonUniformityNormalized": float(np.sum(gl ** 2) / nz ** 2),
        "RunLengthNonUniformity": float(np.sum(rl ** 2) / nz),
        "RunLengthNonUniformityNormalized": float(np.sum(rl ** 2) / nz ** 2),
        "GrayLevelVariance": float(np.sum(p * (i - mu_i) ** 2)),
        "RunVariance": float(np.sum(p * (j - mu_j) ** 2)),
        "RunEntropy": _entropy(p.ravel()),
        "LowGrayLevelRunEmphasis": float(np.sum(P / i ** 2) / nz),
        "HighGrayLevelRunEmphasis": float(np.sum(P * i ** 2) / nz),
        "ShortRunLowGrayLevelEmphasis": float(np.sum(P / (i ** 2 * j ** 2)) / nz),
        "ShortRunHighGrayLevelEmphasis": float(np.sum(P * i ** 2 / j ** 2) / nz),
        "LongRunLowGrayLevelEmphasis": float(np.sum(P * j ** 2 / i ** 2) / nz),
        "LongRunHighGrayLevelEmphasis": float(np.sum(P * i ** 2 * j ** 2) / nz),
    }
    if n_voxels is not None:
        out["RunPercentage"] = float(nz / n_voxels)
    return out


def glrlm_features(matrices: np.ndarray, n_voxels: int) -> dict:
    per_dir = [_zone_features(m, n_voxels) for m in matrices if m.sum() > 0]
    return {name: float(np.mean([f[name] for f in per_dir])) for name in GLRLM_NAMES}


_GLSZM_KEYS = dict(zip(GLSZM_NAMES, (
    "ShortRunEmphasis", "LongRunEmphasis", "GrayLevelNonUniformity",
    "GrayLevelNonUniformityNormalized", "RunLengthNonUniformity",
    "RunLengthNonUniformityNormalized", "RunPercentage", "GrayLevelVariance", "RunVariance",
    "RunEntropy", "LowGrayLevelRunEmphasis", "HighGrayLevelRunEmphasis",
    "ShortRunLowGrayLevelEmphasis", "ShortRunHighGrayLevelEmphasis",
    "LongRunLowGrayLevelEmphasis", "LongRunHighGrayLevelEmphasis",
)))
_GLDM_KEYS = dict(zip(GLDM_NAMES, (
    "ShortRunEmphasis", "LongRunEmphasis", "GrayLevelNonUniformity",
    "RunLengthNonUniformity", "RunLengthNonUniformityNormalized", "GrayLevelVariance",
    "RunVariance", "RunEntropy", "LowGrayLevelRunEmphasis", "HighGrayLevelRunEmphasis",
    "ShortRunLowGrayLevelEmphasis", "ShortRunHighGrayLevelEmphasis",
    "LongRunLowGrayLevelEmphasis", "LongRunHighGrayLevelEmphasis",
)))


def glszm_features(matrix: np.ndarray, n_voxels: int) -> dict:
    f = _zone_features(matrix, n_voxels)
    return {name: f[key] for name, key in _GLSZM_KEYS.items()}


def gldm_features(matrix: np.ndarray) -> dict:
    f = _zone_features(matrix, None)
    return {name: f[key] for name, key in _GLDM_KEYS.items()}


def ngtdm_features(n: np.ndarray, s: np.ndarray) -> dict:
    nvp = n.sum()
    if nvp == 0:
        return {"Coarseness": COARSENESS_LIMIT, "Contrast": 0.0, "Busyness": 0.0,
                "Complexity": 0.0, "Strength": 0.0}
    p = n / nvp
    present = p > 0
    lv = np.arange(1, n.size + 1, dtype=float)[present]
    p, s = p[present], s[present]
    ngp = p.size
    ps = p * s
    ps_sum = ps.sum()
    i, j = lv[:, None], lv[None, :]
    pi, pj = p[:, None], p[None, :]
    sq = (i - j) ** 2

    coarseness = 1.0 / ps_sum if ps_sum > 0 else COARSENESS_LIMIT
    contrast = float(np.sum(pi * pj * sq) / (ngp * (ngp - 1)) * s.sum() / nvp) if ngp > 1 else 0.0
    denom = np.sum(np.abs(i * pi - j * pj))
    busyness = float(ps_sum / denom) if ngp > 1 and denom > 0 else 0.0
    complexity = float(np.sum(np.abs(i - j) * (ps[:, None] + ps[None, :]) / (pi + pj)) / nvp)
    strength = float(np.sum((pi + pj) * sq) / s.sum()) if s.sum() > 0 else 0.0
    return {"Coarseness": float(coarseness), "Contrast": contrast, "Busyness": busyness,
            "Complexity": complexity, "Strength": strength}


def texture_features(image, mask, bin_width: float = 25.0) -> dict:
    """All 75 texture features keyed ``"<family>.<name>"``."""
    disc = discretize(image, mask, bin_width)
    glrlm, n_vox = glrlm_matrices(disc)
    glszm, _ = glszm_matrix(disc)
    families = {
        "glcm": glcm_features(glcm_matrices(disc)),
        "glrlm": glrlm_features(glrlm, n_vox),
        "glszm": glszm_features(glszm, n_vox),
        "gldm": gldm_features(gldm_matrix(disc)),
        "ngtdm": ngtdm_features(*ngtdm_matrix(disc)),
    }
    return {f"{fam}.{name}": families[fam][name]
            for fam, names in TEXTURE_FAMILIES.items() for name in names}
