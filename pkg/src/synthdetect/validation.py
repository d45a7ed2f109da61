"""Shared input checks used across the package."""

from __future__ import annotations

import numpy as np


def as_feature_matrix(x, *, dim: int | None = None, name: str = "features") -> np.ndarray:
    """Return ``x`` as a finite 2-D float64 array, optionally checking its width."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"{name} has width {arr.shape[1]}, expected {dim}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_score_vector(scores, *, n: int | None = None, name: str = "scores") -> np.ndarray:
    """Return ``scores`` as a finite 1-D float64 array."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size < 1:
        raise ValueError(f"{name} must be non-empty")
    if n is not None and arr.size != n:
        raise ValueError(f"{name} has length {arr.size}, expected {n}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_binary_labels(labels, *, n: int | None = None, name: str = "labels") -> np.ndarray:
    """Return ``labels`` as a 1-D uint8 array of 0s and 1s.

    Membership is checked before the cast so negative or large values cannot
    wrap into the valid range.
    """
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size < 1:
        raise ValueError(f"{name} must be non-empty")
    if n is not None and arr.size != n:
        raise ValueError(f"{name} has length {arr.size}, expected {n}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 (fake) and 1 (real)")
    return arr.astype(np.uint8)
