from cryptocatch.features.calculators import MISSING, is_missing
from cryptocatch.features.catalog import (
    FeatureSpec,
    FeatureVector,
    WindowFeatureExtractor,
    default_catalog,
    extract,
    extract_values,
    feature_frame,
    read_matrix,
    resolve_specs,
    write_matrix,
)

__all__ = [
    "MISSING",
    "FeatureSpec",
    "FeatureVector",
    "WindowFeatureExtractor",
    "default_catalog",
    "extract",
    "extract_values",
    "feature_frame",
    "is_missing",
    "read_matrix",
    "resolve_specs",
    "write_matrix",
]
