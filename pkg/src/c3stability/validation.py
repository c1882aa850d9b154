"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .core import CHANNEL_ORDER, WINDOW_LENGTH


def check_frames(X, n_channels: int = len(CHANNEL_ORDER), length: int = WINDOW_LENGTH) -> np.ndarray:
    """Return ``X`` as a finite float64 array of shape (n, n_channels, length)."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 3 or X.shape[1:] != (n_channels, length):
        raise ValueError(f"expected frames of shape (n, {n_channels}, {length}), got {X.shape}")
    return X


def check_targets(y, X=None) -> np.ndarray:
    """Return ``y`` as a 1-D float64 array with every value in [0, 1]."""
    y = check_array(y, ensure_2d=False, dtype=np.float64, ensure_all_finite=True)
    if y.ndim != 1:
        raise ValueError(f"targets must be 1-D, got shape {y.shape}")
    if np.any((y < 0) | (y > 1)):
        raise ValueError("targets must lie in [0, 1]")
    if X is not None:
        check_consistent_length(X, y)
    return y
