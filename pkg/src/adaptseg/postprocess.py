"""Cluster-adaptive post-processing of label predictions.

A prediction is assigned to a radiomic cluster of its predicted whole
tumor. The cluster's policy then (1) removes connected components of each
label that are smaller than a per-label voxel threshold, and (2) relabels
all ET voxels as NCR when the ET/WT ratio of the cleaned map is below a
per-cluster threshold. Voxels demoted in step 2 are NCR from then on, so
the NCR size threshold is applied to them too; without that, a second
application could remove freshly demoted specks and the policy would not
be idempotent.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_connectivity, check_labels
from .metrics import LesionParams, _GroundTruth, _lesion_wise
from .volume import ET, LABELS, NCR, REGIONS, connected_components, regions_from_labels

DEFAULT_SIZE_GRID = (0, 25, 50, 75, 100, 150, 200, 250)
DEFAULT_RATIO_GRID = (0.0, 0.05, 0.1, 0.15, 0.2)
EMPTY_CLUSTER = None  # sentinel for predictions with an empty whole tumor


@dataclass
class ClusterPolicy:
    lesion_thresholds: dict  # label (1, 2, 3) -> min component size in voxels
    et_wt_threshold: float = 0.0

    def __post_init__(self):
        self.lesion_thresholds = {int(k): int(v) for k, v in self.lesion_thresholds.items()}
        if set(self.lesion_thresholds) != set(LABELS):
            raise ValueError(f"lesion thresholds must cover labels {LABELS}")
        if any(v < 0 for v in self.lesion_thresholds.values()):
            raise ValueError("lesion thresholds must be non-negative")
        if not 0.0 <= self.et_wt_threshold <= 1.0:
            raise ValueError(f"ET/WT threshold must lie in [0, 1], got {self.et_wt_threshold}")

    @classmethod
    def identity(cls) -> "ClusterPolicy":
        return cls(dict.fromkeys(LABELS, 0), 0.0)

    def is_identity(self) -> bool:
        return not any(self.lesion_thresholds.values()) and self.et_wt_threshold == 0.0


@dataclass
class PostprocessPolicy:
    clusters: dict = field(default_factory=dict)  # cluster id -> ClusterPolicy
    connectivity: int = 26

    def __post_init__(self):
        check_connectivity(self.connectivity)
        self.clusters = {int(k): v for k, v in sorted(self.clusters.items())}
        if sorted(self.clusters) != list(range(len(self.clusters))):
            raise ValueError(f"cluster ids must be 0..n-1, got {sorted(self.clusters)}")

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @classmethod
    def all_zero(cls, n_clusters: int, connectivity: int = 26) -> "PostprocessPolicy":
        return cls({c: ClusterPolicy.identity() for c in range(n_clusters)}, connectivity)

    def to_json(self) -> str:
        doc = {
            "connectivity": self.connectivity,
            "clusters": [
                {"id": c, "lesion_thresholds": {str(k): v for k, v in sorted(p.lesion_thresholds.items())},
                 "et_wt_threshold": p.et_wt_threshold}
                for c, p in self.clusters.items()
            ],
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PostprocessPolicy":
        doc = json.loads(text)
        clusters = {int(c["id"]): ClusterPolicy(c["lesion_thresholds"], float(c["et_wt_threshold"]))
                    for c in doc["clusters"]}
        return cls(clusters, int(doc.get("connectivity", 26)))


def reference_policy() -> PostprocessPolicy:
    """Nine-cluster reference policy shipped with the package (clusters 0-8).

    Its source reports eight clusters in prose but tabulates nine; all nine
    are kept.
    """
    return PostprocessPolicy.from_json(
        resources.files("adaptseg.data").joinpath("reference_policy.json").read_text())


def et_wt_ratio(labels) -> float:
    lab = check_labels(labels)
    wt = int(np.count_nonzero(lab))
    return int(np.count_nonzero(lab == ET)) / wt if wt else 0.0


def remove_small_label_components(labels, thresholds: dict, connectivity: int = 26) -> np.ndarray:
    lab = check_labels(labels).copy()
    for label in LABELS:
        t = int(thresholds.get(label, 0))
        if t <= 0:
            continue
        cc = connected_components(lab == label, connectivity)
        small = np.flatnonzero(cc.sizes < t) + 1
        if small.size:
            lab[np.isin(cc.labels, small)] = 0
    return lab


def relabel_low_et(labels, threshold: float) -> np.ndarray:
    lab = check_labels(labels).copy()
    if (lab == ET).any() and et_wt_ratio(lab) < threshold:
        lab[lab == ET] = NCR
    return lab


def apply_policy(labels, cluster, policy: PostprocessPolicy) -> np.ndarray:
    """Size filtering, then ET->NCR relabeling, for the given cluster.

    When relabeling fires, the NCR threshold is re-applied so the result
    is a fixed point of the policy. ``cluster`` of ``None`` (empty
    predicted WT) returns an unchanged copy.
    """
    lab = check_labels(labels)
    if cluster is EMPTY_CLUSTER:
        return lab.copy()
    if int(cluster) not in policy.clusters:
        raise KeyError(f"policy has no cluster {cluster}")
    cp = policy.clusters[int(cluster)]
    out = remove_small_label_components(lab, cp.lesion_thresholds, policy.connectivity)
    relabeled = relabel_low_et(out, cp.et_wt_threshold)
    if cp.lesion_thresholds[NCR] > 0 and not np.array_equal(relabeled, out):
        relabeled = remove_small_label_components(relabeled, {NCR: cp.lesion_thresholds[NCR]}, policy.connectivity)
    return relabeled


class ClusterAssigner:
    """Assigns predictions to clusters of a stratifier fitted on predicted-WT features."""

    def __init__(self, stratifier, feature_fn=None):
        self.stratifier = stratifier
        if feature_fn is None:
            from .radiomics import case_features
            feature_fn = case_features
        self.feature_fn = feature_fn

    def assign(self, case, pred):
        wt = check_labels(pred) > 0
        if not wt.any():
            return EMPTY_CLUSTER
        vec = self.feature_fn(case, wt)
        return int(self.stratifier.predict(vec.values[None, :])[0])


def assign_cluster(case, pred, assigner: ClusterAssigner):
    return assigner.assign(case, pred)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

class _CaseObjective:
    """Caches everything about one (prediction, ground truth) pair that the
    grid search reuses.

    Removing components below threshold ``t`` only depends on how many of
    the sorted component sizes fall below ``t``, so results are memoized
    on that count per label.
    """

    def __init__(self, pred, gt, spacing, params: LesionParams, connectivity: int):
        self.pred = check_labels(pred)
        self.spacing = spacing
        self.params = params
        self.connectivity = connectivity
        gt_regions = regions_from_labels(gt).as_dict()
        self.gt = {r: _GroundTruth(gt_regions[r], params) for r in REGIONS}
        self.components = {}
        for label in LABELS:
            cc = connected_components(self.pred == label, connectivity)
            order = np.argsort(cc.sizes, kind="stable")
            self.components[label] = (cc.labels, cc.sizes[order], order + 1)
        self._cache = {}

    def key(self, thresholds) -> tuple:
        return tuple(int(np.searchsorted(self.components[lb][1], thresholds[i], side="left"))
                     for i, lb in enumerate(LABELS))

    def cleaned(self, key) -> np.ndarray:
        lab = self.pred.copy()
        for n_small, label in zip(key, LABELS):
            if n_small:
                cc_labels, _, ids = self.components[label]
                lab[np.isin(cc_labels, ids[:n_small])] = 0
        return lab

    def score_labels(self, lab) -> float:
        regions = regions_from_labels(lab).as_dict()
        return float(np.mean([_lesion_wise(self.gt[r], regions[r], self.spacing, self.params).dice
                              for r in REGIONS]))

    def score(self, thresholds, ratio: float | None = None) -> float:
        key = self.key(thresholds)
        lab = None
        relabel = False
        if ratio is not None:
            lab = self.cleaned(key)
            relabel = bool((lab == ET).any()) and et_wt_ratio(lab) < ratio
        # after demotion the NCR threshold acts on new components, so it joins the key
        ck = (key, relabel, int(thresholds[0]) if relabel else 0)
        if ck not in self._cache:
            lab = self.cleaned(key) if lab is None else lab
            if relabel:
                lab = lab.copy()
                lab[lab == ET] = NCR
                if thresholds[0] > 0:
                    lab = remove_small_label_components(lab, {NCR: thresholds[0]}, self.connectivity)
            self._cache[ck] = self.score_labels(lab)
        return self._cache[ck]


def _destructiveness(combo) -> tuple:
    return (sum(combo), tuple(combo))


def fit_policy(cases, size_grid=DEFAULT_SIZE_GRID, ratio_grid=DEFAULT_RATIO_GRID, n_clusters: int | None = None,
               spacing=(1.0, 1.0, 1.0), params: LesionParams | None = None, connectivity: int = 26,
               return_scores: bool = False):
    """Per-cluster exhaustive grid search of post-processing thresholds.

    ``cases`` is an iterable of ``(pred_labels, gt_labels, cluster)`` or
    ``(pred_labels, gt_labels, cluster, spacing)``; entries with cluster
    ``None`` are ignored. The objective is the mean
    over a cluster's cases of the mean ET/TC/WT lesion-wise Dice. Size
    thresholds are searched first over ``size_grid``^3, then the ET/WT
    ratio over ``ratio_grid`` with the sizes fixed. Ties go to the least
    destructive candidate (smallest threshold sum, then lexicographic).
    Clusters without cases keep all-zero thresholds.
    """
    params = params or LesionParams()
    size_grid = sorted(set(int(t) for t in size_grid))
    ratio_grid = sorted(set(float(r) for r in ratio_grid))
    if 0 not in size_grid or 0.0 not in ratio_grid:
        raise ValueError("threshold grids must contain 0")
    by_cluster = {}
    for item in cases:
        pred, gt, cluster = item[:3]
        if cluster is EMPTY_CLUSTER:
            continue
        case_spacing = item[3] if len(item) > 3 else spacing
        by_cluster.setdefault(int(cluster), []).append(
            _CaseObjective(pred, gt, case_spacing, params, connectivity))
    if n_clusters is None:
        n_clusters = max(by_cluster, default=-1) + 1
    combos = sorted(itertools.product(size_grid, repeat=3), key=_destructiveness)
    policy, scores = {}, {}
    for c in range(n_clusters):
        objs = by_cluster.get(c, [])
        if not objs:
            policy[c] = ClusterPolicy.identity()
            continue
        baseline = float(np.mean([o.score((0, 0, 0)) for o in objs]))
        best, best_score = (0, 0, 0), baseline
        for combo in combos:
            s = float(np.mean([o.score(combo) for o in objs]))
            if s > best_score + 1e-12:
                best, best_score = combo, s
        best_ratio = 0.0
        for r in ratio_grid:
            s = float(np.mean([o.score(best, r) for o in objs]))
            if s > best_score + 1e-12:
                best_ratio, best_score = r, s
        policy[c] = ClusterPolicy(dict(zip(LABELS, best)), best_ratio)
        scores[c] = {"n_cases": len(objs), "before": baseline, "after": best_score}
    fitted = PostprocessPolicy(policy, connectivity)
    return (fitted, scores) if return_scores else fitted


class AdaptivePostprocessor(BaseEstimator):
    """Estimator form of :func:`fit_policy` / :func:`apply_policy`.

    ``fit(preds, gts, clusters)`` learns ``policy_``;
    ``predict(preds, clusters)`` applies it.
    """

    def __init__(self, size_grid=DEFAULT_SIZE_GRID, ratio_grid=DEFAULT_RATIO_GRID, n_clusters=None,
                 connectivity: int = 26, spacing=(1.0, 1.0, 1.0), lesion_params: LesionParams | None = None):
        self.size_grid = size_grid
        self.ratio_grid = ratio_grid
        self.n_clusters = n_clusters
        self.connectivity = connectivity
        self.spacing = spacing
        self.lesion_params = lesion_params

    def fit(self, preds, gts, clusters):
        self.policy_, self.scores_ = fit_policy(
            zip(preds, gts, clusters), self.size_grid, self.ratio_grid, self.n_clusters,
            self.spacing, self.lesion_params, self.connectivity, return_scores=True)
        return self

    def predict(self, preds, clusters):
        return [apply_policy(p, c, self.policy_) for p, c in zip(preds, clusters)]
