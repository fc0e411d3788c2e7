"""Input checks shared by the estimator API."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length, column_or_1d


def check_images(X, min_size: int = 2) -> np.ndarray:
    """Validate an (N, H, W, 3) batch of images with values in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (n, height, width, 3), got {X.shape}")
    if X.shape[1] < min_size or X.shape[2] < min_size:
        raise ValueError(f"images must be at least {min_size} x {min_size}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return np.ascontiguousarray(X)


def check_images_labels(X, y):
    X = check_images(X)
    y = column_or_1d(y, warn=True)
    check_consistent_length(X, y)
    return X, y
