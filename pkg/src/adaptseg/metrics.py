"""Volumetric and lesion-wise Dice / HD95 for ET, TC and WT.

Lesion-wise scoring
-------------------
Ground-truth and predicted masks are split into connected components.
Each ground-truth lesion is dilated; every predicted component touching
the dilated lesion is matched to it (a predicted component may be shared
by several lesions). A lesion scores Dice and HD95 against the union of
its matched components, or (0, penalty) when nothing matched. Each
unmatched predicted component larger than ``min_fp_size`` adds a
(0, penalty) entry. The case score is the mean over all entries.

Surfaces for HD95 are foreground voxels with at least one background
6-neighbor; voxels on the volume border count as surface. Distances are
between voxel centers in mm, and the 95th percentile uses linear
interpolation between order statistics.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from ._validation import check_connectivity, check_mask, check_same_shape, check_spacing
from .volume import REGIONS, connected_components, regions_from_labels, structuring_element

PERCENTILE = 95.0


@dataclass(frozen=True)
class LesionParams:
    connectivity: int = 26
    dilation_radius: int = 1
    penalty: float = 374.0
    min_fp_size: int = 0

    def __post_init__(self):
        check_connectivity(self.connectivity)
        if self.dilation_radius < 0:
            raise ValueError("dilation_radius must be non-negative")
        if self.penalty < 0:
            raise ValueError("penalty must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict) -> "LesionParams":
        return cls(**{k: doc[k] for k in ("connectivity", "dilation_radius", "penalty", "min_fp_size") if k in doc})


@dataclass
class LesionMatch:
    gt_component: int
    matched: list
    dice: float
    hd95: float
    status: str  # "matched" | "false_negative"


@dataclass
class LesionResult:
    dice: float
    hd95: float
    lesions: list
    false_positives: list  # component ids of counted false positives
    n_gt: int
    n_pred: int

    @property
    def n_matched(self) -> int:
        return sum(m.status == "matched" for m in self.lesions)

    @property
    def n_false_negative(self) -> int:
        return sum(m.status == "false_negative" for m in self.lesions)


def _pair(a, b):
    a, b = check_mask(a, "a"), check_mask(b, "b")
    check_same_shape(a, b, names=("a", "b"))
    return a, b


def volumetric_dice(a, b) -> float:
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_voxels(mask) -> np.ndarray:
    m = check_mask(mask)
    return m & ~ndimage.binary_erosion(m, structure=structuring_element(6), border_value=0)


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Symmetric surface distances (mm): a->b nearest, then b->a nearest."""
    a, b = _pair(a, b)
    sp = check_spacing(spacing)
    pa = np.argwhere(surface_voxels(a)) * sp
    pb = np.argwhere(surface_voxels(b)) * sp
    if not len(pa) or not len(pb):
        raise ValueError("surface distances need two non-empty masks")
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return np.concatenate([d_ab, d_ba])


def volumetric_hd95(a, b, spacing=(1.0, 1.0, 1.0), penalty: float = LesionParams.penalty) -> float:
    a, b = _pair(a, b)
    has_a, has_b = a.any(), b.any()
    if not has_a and not has_b:
        return 0.0
    if has_a != has_b:
        return float(penalty)
    return float(np.percentile(surface_distances(a, b, spacing), PERCENTILE))


def _grow(slc, shape, margin):
    return tuple(slice(max(s.start - margin, 0), min(s.stop + margin, n)) for s, n in zip(slc, shape))


def _union_slices(slices):
    return tuple(slice(min(s[d].start for s in slices), max(s[d].stop for s in slices)) for d in range(3))


class _GroundTruth:
    """Components and match regions of one ground-truth mask (reusable)."""

    def __init__(self, gt: np.ndarray, params: LesionParams):
        self.shape = gt.shape
        cc = connected_components(gt, params.connectivity)
        self.labels = cc.labels
        self.n = cc.n_components
        self.slices = ndimage.find_objects(self.labels)
        structure = structuring_element(params.connectivity)
        self.regions = []
        for g, slc in enumerate(self.slices, start=1):
            box = _grow(slc, self.shape, params.dilation_radius)
            local = self.labels[box] == g
            if params.dilation_radius > 0:
                local = ndimage.binary_dilation(local, structure=structure, iterations=params.dilation_radius)
            self.regions.append((box, local))


def _lesion_wise(gt: _GroundTruth, pred: np.ndarray, spacing, params: LesionParams) -> LesionResult:
    pcc = connected_components(pred, params.connectivity)
    pslices = ndimage.find_objects(pcc.labels)
    matched_any = np.zeros(pcc.n_components + 1, dtype=bool)
    lesions = []
    for g, (box, region) in enumerate(gt.regions, start=1):
        ids = np.unique(pcc.labels[box][region])
        ids = [int(i) for i in ids if i]
        if not ids:
            lesions.append(LesionMatch(g, [], 0.0, float(params.penalty), "false_negative"))
            continue
        matched_any[ids] = True
        box = _grow(_union_slices([gt.slices[g - 1]] + [pslices[i - 1] for i in ids]), gt.shape, 1)
        gt_local = gt.labels[box] == g
        pred_local = np.isin(pcc.labels[box], ids)
        dice = volumetric_dice(gt_local, pred_local)
        hd = float(np.percentile(surface_distances(gt_local, pred_local, spacing), PERCENTILE))
        lesions.append(LesionMatch(g, ids, dice, hd, "matched"))
    fps = [i for i in range(1, pcc.n_components + 1)
           if not matched_any[i] and pcc.sizes[i - 1] > params.min_fp_size]
    dices = [m.dice for m in lesions] + [0.0] * len(fps)
    hds = [m.hd95 for m in lesions] + [float(params.penalty)] * len(fps)
    if not dices:
        dice, hd = 1.0, 0.0
    else:
        dice, hd = float(np.mean(dices)), float(np.mean(hds))
    return LesionResult(dice, hd, lesions, fps, gt.n, pcc.n_components)


def lesion_wise(gt, pred, spacing=(1.0, 1.0, 1.0), params: LesionParams | None = None) -> LesionResult:
    params = params or LesionParams()
    gt, pred = _pair(gt, pred)
    check_spacing(spacing)
    return _lesion_wise(_GroundTruth(gt, params), pred, spacing, params)


@dataclass
class RegionReport:
    lesion_wise_dice: float
    lesion_wise_hd95: float
    volumetric_dice: float
    volumetric_hd95: float
    n_gt_lesions: int
    n_matched: int
    n_false_negative: int
    n_false_positive: int
    lesions: list = field(default_factory=list, repr=False)


@dataclass
class CaseReport:
    case_id: str
    regions: dict  # "ET" | "TC" | "WT" -> RegionReport
    params: LesionParams

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "params": asdict(self.params),
                "regions": {r: asdict(self.regions[r]) for r in REGIONS}}


def region_report(gt, pred, spacing, params: LesionParams, gt_cache: _GroundTruth | None = None) -> RegionReport:
    gt_cache = gt_cache or _GroundTruth(gt, params)
    lw = _lesion_wise(gt_cache, pred, spacing, params)
    return RegionReport(
        lesion_wise_dice=lw.dice,
        lesion_wise_hd95=lw.hd95,
        volumetric_dice=volumetric_dice(gt, pred),
        volumetric_hd95=volumetric_hd95(gt, pred, spacing, params.penalty),
        n_gt_lesions=lw.n_gt,
        n_matched=lw.n_matched,
        n_false_negative=lw.n_false_negative,
        n_false_positive=len(lw.false_positives),
        lesions=[asdict(m) for m in lw.lesions],
    )


def evaluate_case(gt_labels, pred_labels, spacing=(1.0, 1.0, 1.0), params: LesionParams | None = None,
                  case_id: str = "") -> CaseReport:
    params = params or LesionParams()
    check_same_shape(gt_labels, pred_labels, names=("ground truth", "prediction"))
    gt_r = regions_from_labels(gt_labels).as_dict()
    pr_r = regions_from_labels(pred_labels).as_dict()
    return CaseReport(case_id, {r: region_report(gt_r[r], pr_r[r], spacing, params) for r in REGIONS}, params)


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("case_id", "region", "lesion_wise_dice", "lesion_wise_hd95", "volumetric_dice",
               "volumetric_hd95", "n_gt_lesions", "n_matched", "n_false_negative", "n_false_positive")
MEAN_ROW = "__mean__"


def mean_rows(reports) -> dict:
    out = {}
    for r in REGIONS:
        rows = [rep.regions[r] for rep in reports]
        out[r] = {k: float(np.mean([getattr(x, k) for x in rows])) if rows else float("nan")
                  for k in CSV_COLUMNS[2:]}
    return out


def reports_to_csv(reports, params: LesionParams) -> str:
    """One row per (case, region) sorted by case id, then a mean row per region.

    The first line is a ``# params:`` comment holding the matching
    parameters as JSON.
    """
    reports = sorted(reports, key=lambda r: r.case_id)
    buf = io.StringIO()
    buf.write("# params: " + json.dumps(asdict(params), sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rep in reports:
        for r in REGIONS:
            row = asdict(rep.regions[r])
            writer.writerow([rep.case_id, r, *(_fmt(row[k]) for k in CSV_COLUMNS[2:])])
    for r, row in mean_rows(reports).items():
        writer.writerow([MEAN_ROW, r, *(_fmt(row[k]) for k in CSV_COLUMNS[2:])])
    return buf.getvalue()


def reports_to_json(reports, params: LesionParams) -> str:
    reports = sorted(reports, key=lambda r: r.case_id)
    doc = {"params": asdict(params), "cases": [rep.to_dict() for rep in reports], "mean": mean_rows(reports)}
    return json.dumps(doc, indent=2) + "\n"


def _fmt(x):
    return repr(float(x)) if isinstance(x, float) else str(x)
