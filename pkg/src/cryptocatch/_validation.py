"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np


def check_finite_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a 2-D float array and reject NaN/inf."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_labels(y, n_samples: int) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1 or arr.size != n_samples:
        raise ValueError(f"expected {n_samples} labels, got shape {arr.shape}")
    return arr


def check_min_class_count(y, minimum: int, what: str = "class") -> np.ndarray:
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ValueError("training data must contain at least two classes")
    if counts.min() < minimum:
        bad = classes[counts.argmin()]
        raise ValueError(f"{what} {bad!r} has {counts.min()} samples, need at least {minimum}")
    return classes
