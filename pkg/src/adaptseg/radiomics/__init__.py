"""Shape, first-order and texture radiomics on a region of interest."""

from .features import (
    DEFAULT_BIN_WIDTH,
    FeatureTable,
    FeatureVector,
    case_features,
    feature_names,
    intensity_features,
)
from .firstorder import FIRST_ORDER_NAMES, DiscretizedImage, discretize, first_order_features
from .shape import SHAPE_NAMES, shape_features
from .texture import TEXTURE_FAMILIES, texture_features

__all__ = [
    "DEFAULT_BIN_WIDTH", "DiscretizedImage", "FIRST_ORDER_NAMES", "FeatureTable",
    "FeatureVector", "SHAPE_NAMES", "TEXTURE_FAMILIES", "case_features", "discretize",
    "feature_names", "first_order_features", "intensity_features", "shape_features",
    "texture_features",
]
