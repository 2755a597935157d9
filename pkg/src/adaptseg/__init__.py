"""Segmentation-pipeline toolkit for 3D brain-tumor label volumes.

Radiomics-based fold stratification, weighted ensembling of region
probability maps, cluster-adaptive post-processing and lesion-wise
evaluation. Network inference is out of scope; saved probability maps are
the inputs.
"""

__version__ = "0.1.0"

from .ensemble import EnsembleWeights, RegionProbabilityMaps, WeightedEnsemble, decode, ensemble
from .metrics import LesionParams, evaluate_case, lesion_wise, volumetric_dice, volumetric_hd95
from .postprocess import AdaptivePostprocessor, PostprocessPolicy, apply_policy, fit_policy
from .stratify import Stratifier, assign_folds
from .volume import LabelVolume, VoxelGrid, labels_from_regions, regions_from_labels

__all__ = [
    "AdaptivePostprocessor", "EnsembleWeights", "LabelVolume", "LesionParams", "PostprocessPolicy",
    "RegionProbabilityMaps", "Stratifier", "VoxelGrid", "WeightedEnsemble", "apply_policy",
    "assign_folds", "decode", "ensemble", "evaluate_case", "fit_policy", "labels_from_regions",
    "lesion_wise", "regions_from_labels", "volumetric_dice", "volumetric_hd95",
]
