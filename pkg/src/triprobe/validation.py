"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np


def check_images(X, expect_hw=None, name: str = "X") -> np.ndarray:
    """Validate a (N, H, W, 3) float image batch with values in [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"{name} must be (n_samples, H, W, 3), got shape {X.shape}")
    if expect_hw is not None and X.shape[1:3] != tuple(expect_hw):
        raise ValueError(f"{name} spatial shape {X.shape[1:3]} does not match "
                         f"the configured {tuple(expect_hw)}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]; got "
                         f"[{X.min():.4g}, {X.max():.4g}]")
    return X


def check_multilabel(Y, n_classes: int, n_samples: int | None = None,
                     name: str = "Y") -> np.ndarray:
    """Validate an (N, n_classes) binary indicator matrix."""
    Y = np.asarray(Y)
    if Y.ndim != 2 or Y.shape[1] != n_classes:
        raise ValueError(f"{name} must be (n_samples, {n_classes}), got shape {Y.shape}")
    if n_samples is not None and Y.shape[0] != n_samples:
        raise ValueError(f"{name} has {Y.shape[0]} rows but X has {n_samples}")
    if not np.isin(Y, (0, 1)).all():
        raise ValueError(f"{name} must be a binary indicator matrix")
    return Y.astype(np.uint8)


def check_fitted(estimator, attr: str = "net_"):
    if not hasattr(estimator, attr):
        raise RuntimeError(
            f"{type(estimator).__name__} instance is not fitted yet; call fit first")
    return getattr(estimator, attr)
