"""Weighted ensembling of per-model region probability maps."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_same_shape
from .volume import VoxelGrid, labels_from_regions

DEFAULT_THRESHOLD = 0.5


def activate(raw):
    """Logistic sigmoid, unless every value already lies in [0, 1].

    Accepts an array or a :class:`VoxelGrid` and returns the same kind.
    """
    arr = np.asarray(getattr(raw, "data", raw), dtype=float)
    if np.isnan(arr).any():
        raise ValueError("NaN in network output")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        with np.errstate(over="ignore"):
            arr = 1.0 / (1.0 + np.exp(-arr))
    return raw.with_data(arr) if isinstance(raw, VoxelGrid) else arr


@dataclass(frozen=True, eq=False)
class RegionProbabilityMaps:
    """ET/TC/WT probability volumes of one model on one case."""

    et: VoxelGrid
    tc: VoxelGrid
    wt: VoxelGrid
    model_name: str = ""

    def __post_init__(self):
        grids = [g if isinstance(g, VoxelGrid) else VoxelGrid(np.asarray(g, dtype=float))
                 for g in (self.et, self.tc, self.wt)]
        ref = grids[0]
        for g in grids[1:]:
            if not ref.same_geometry(g):
                raise ValueError(f"{self.model_name}: region maps disagree in geometry")
        for name, g in zip(("et", "tc", "wt"), grids):
            object.__setattr__(self, name, g)

    @classmethod
    def from_arrays(cls, et, tc, wt, affine=None, model_name: str = ""):
        affine = np.eye(4) if affine is None else affine
        return cls(*(VoxelGrid(np.asarray(a, dtype=float), affine) for a in (et, tc, wt)), model_name)

    def arrays(self):
        return self.et.data, self.tc.data, self.wt.data

    def activated(self) -> "RegionProbabilityMaps":
        return RegionProbabilityMaps(activate(self.et), activate(self.tc), activate(self.wt), self.model_name)


class EnsembleWeights(dict):
    """Model name -> non-negative weight, normalized to sum to 1."""

    def __init__(self, weights):
        weights = dict(weights)
        if not weights:
            raise ValueError("at least one model weight is required")
        for name, w in weights.items():
            if not np.isfinite(w) or w < 0:
                raise ValueError(f"weight of {name!r} must be finite and non-negative, got {w}")
        total = float(sum(weights.values()))
        if total <= 0:
            raise ValueError("weights must not all be zero")
        super().__init__({name: float(w) / total for name, w in sorted(weights.items())})


def load_weights_config(text: str):
    """Parse ``{"models": {name: weight}, "threshold": t}``."""
    doc = json.loads(text)
    if "models" not in doc:
        raise ValueError("weights file needs a 'models' object")
    threshold = float(doc.get("threshold", DEFAULT_THRESHOLD))
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return EnsembleWeights(doc["models"]), threshold


def weights_config_json(weights, threshold: float = DEFAULT_THRESHOLD, extra: dict | None = None) -> str:
    doc = {"models": dict(weights), "threshold": threshold}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2) + "\n"


def default_weights_text() -> str:
    return resources.files("adaptseg.data").joinpath("default_weights.json").read_text()


def ensemble(maps, weights) -> RegionProbabilityMaps:
    """Voxelwise convex combination of region maps.

    ``maps`` is a mapping or sequence of :class:`RegionProbabilityMaps`
    keyed by ``model_name``. Models are summed in sorted-name order, and
    the result is clipped to the voxelwise [min, max] over models so that
    rounding can never leave the convex hull of the inputs.
    """
    if not isinstance(maps, dict):
        maps = {m.model_name: m for m in maps}
    if not maps:
        raise ValueError("at least one model is required")
    if not isinstance(weights, EnsembleWeights):
        weights = EnsembleWeights(weights)
    missing = sorted(set(maps) - set(weights))
    if missing:
        raise ValueError(f"missing weight for model(s) {missing}")
    names = sorted(maps)
    ref = maps[names[0]]
    for name in names[1:]:
        if not ref.et.same_geometry(maps[name].et):
            raise ValueError(f"geometry mismatch between models {names[0]!r} and {name!r}")
    total_w = sum(weights[n] for n in names)
    if total_w <= 0:
        raise ValueError("selected models carry zero total weight")
    out = []
    for region in ("et", "tc", "wt"):
        stack = [np.asarray(getattr(maps[n], region).data, dtype=float) for n in names]
        acc = np.zeros_like(stack[0])
        for n, arr in zip(names, stack):
            acc += (weights[n] / total_w) * arr
        lo = np.minimum.reduce(stack)
        hi = np.maximum.reduce(stack)
        out.append(ref.et.with_data(np.clip(acc, lo, hi)))
    return RegionProbabilityMaps(*out, model_name="ensemble")


def decode(probs, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Threshold each region map and decode hierarchically to labels."""
    arrays = probs.arrays() if isinstance(probs, RegionProbabilityMaps) else probs
    check_same_shape(*arrays, names=("et", "tc", "wt"))
    return labels_from_regions(tuple(np.asarray(a) >= threshold for a in arrays))


def weights_from_cv(scores) -> EnsembleWeights:
    """Weights proportional to each model's mean cross-validation Dice.

    ``scores`` maps a model name to a scalar mean or a list of per-fold
    scores.
    """
    means = {}
    for name, s in dict(scores).items():
        m = float(np.mean(s))
        if not np.isfinite(m) or m <= 0:
            raise ValueError(f"score of {name!r} must be positive, got {m}")
        means[name] = m
    return EnsembleWeights(means)


class WeightedEnsemble(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``transform`` ensembles maps, ``predict`` decodes labels.

    ``fit`` with per-model CV scores sets the weights by normalization;
    otherwise the ``weights`` parameter is used as given.
    """

    def __init__(self, weights=None, threshold: float = DEFAULT_THRESHOLD, activate_inputs: bool = True):
        self.weights = weights
        self.threshold = threshold
        self.activate_inputs = activate_inputs

    def fit(self, X=None, y=None, cv_scores=None):
        if cv_scores is not None:
            self.weights_ = weights_from_cv(cv_scores)
        elif self.weights is not None:
            self.weights_ = EnsembleWeights(self.weights)
        else:
            self.weights_ = EnsembleWeights(json.loads(default_weights_text())["models"])
        return self

    def _weights(self):
        return getattr(self, "weights_", None) or self.fit().weights_

    def transform(self, maps):
        if not isinstance(maps, dict):
            maps = {m.model_name: m for m in maps}
        if self.activate_inputs:
            maps = {n: m.activated() for n, m in maps.items()}
        return ensemble(maps, self._weights())

    def predict(self, maps) -> np.ndarray:
        return decode(self.transform(maps), self.threshold)
