"""Per-case radiomic feature vectors and feature tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ..nifti import SEQUENCES
from .firstorder import FIRST_ORDER_NAMES, first_order_features
from .shape import SHAPE_NAMES, shape_features
from .texture import TEXTURE_FAMILIES, texture_features

DEFAULT_BIN_WIDTH = 25.0


def intensity_feature_names(prefix: str = "") -> list:
    names = [f"firstorder.{n}" for n in FIRST_ORDER_NAMES]
    names += [f"{fam}.{n}" for fam, fam_names in TEXTURE_FAMILIES.items() for n in fam_names]
    return [prefix + n for n in names]


def feature_names() -> list:
    """The 386 column names in fixed order: shape, then t1, t1ce, t2, flair."""
    names = [f"shape.{n}" for n in SHAPE_NAMES]
    for seq in SEQUENCES:
        names += intensity_feature_names(f"{seq}.")
    return names


@dataclass(frozen=True, eq=False)
class FeatureVector:
    case_id: str
    names: tuple
    values: np.ndarray

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values.tolist()))


def intensity_features(image, mask, bin_width: float = DEFAULT_BIN_WIDTH) -> dict:
    """First-order (18) plus texture (75) features of one sequence."""
    out = {f"firstorder.{k}": v for k, v in first_order_features(image, mask, bin_width).items()}
    out.update(texture_features(image, mask, bin_width))
    return out


def case_features(case, mask, bin_width: float = DEFAULT_BIN_WIDTH,
                  smoothing_iterations: int = 10) -> FeatureVector:
    """386-value radiomic vector of ``mask`` (usually the WT) on all four sequences."""
    mask = np.asarray(getattr(mask, "data", mask)).astype(bool)
    if not mask.any():
        raise ValueError(f"{case.case_id}: empty mask")
    values = dict(
        (f"shape.{k}", v)
        for k, v in shape_features(mask, case.grid.spacing, smoothing_iterations).items()
    )
    for seq, image in case.sequences().items():
        for k, v in intensity_features(image, mask, bin_width).items():
            values[f"{seq}.{k}"] = v
    names = feature_names()
    return FeatureVector(case.case_id, tuple(names), np.array([values[n] for n in names]))


@dataclass(eq=False)
class FeatureTable:
    """Rows of feature vectors sharing one ordered set of column names."""

    case_ids: list
    names: list
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.case_ids), len(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")
        if len(set(self.case_ids)) != len(self.case_ids):
            raise ValueError("case ids must be unique")

    @classmethod
    def from_vectors(cls, vectors) -> "FeatureTable":
        vectors = sorted(vectors, key=lambda v: v.case_id)
        if not vectors:
            raise ValueError("no feature vectors")
        names = list(vectors[0].names)
        for v in vectors:
            if list(v.names) != names:
                raise ValueError(f"{v.case_id}: feature names differ from {vectors[0].case_id}")
        return cls([v.case_id for v in vectors], names, np.vstack([v.values for v in vectors]))

    def __len__(self):
        return len(self.case_ids)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["case_id", *self.names])
        for cid, row in zip(self.case_ids, self.values):
            writer.writerow([cid, *(repr(float(x)) for x in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FeatureTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][:1] != ["case_id"]:
            raise ValueError("feature CSV must start with a 'case_id' header column")
        header, body = rows[0], [r for r in rows[1:] if r]
        values = [[float(x) if x not in ("", "nan") else np.nan for x in r[1:]] for r in body]
        return cls([r[0] for r in body], header[1:], np.array(values, dtype=float).reshape(len(body), len(header) - 1))

    def impute_median(self) -> "FeatureTable":
        """Replace non-finite entries with their column median (0 for all-NaN columns)."""
        vals = np.where(np.isfinite(self.values), self.values, np.nan)
        med = np.nanmedian(np.where(np.isnan(vals).all(0), 0.0, vals), axis=0) if len(self) else []
        filled = np.where(np.isnan(vals), med, vals)
        return FeatureTable(list(self.case_ids), list(self.names), filled)
