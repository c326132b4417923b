"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def check_images(X, input_shape=None) -> np.ndarray:
    """Validate a batch of images: finite float32 [N, C, H, W]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape [N, C, H, W], got {X.shape}")
    if X.shape[0] < 1:
        raise ValueError("empty image batch")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise ValueError(f"images have shape {X.shape[1:]}, estimator was fit on {tuple(input_shape)}")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"expected {n_samples} integer labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        yi = y.astype(np.int64)
        if not np.array_equal(yi, y):
            raise ValueError("labels must be integers")
        y = yi
    return y.astype(np.int64)


def check_feature_maps(X) -> np.ndarray:
    """Validate feature tensors for the channel compressor: [N, C, ...]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim not in (2, 4):
        raise ValueError(f"expected [N, C] or [N, C, H, W] features, got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("features contain non-finite values")
    return X


def check_is_fitted(estimator, attribute: str):
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit first")
