"""Input validation helpers shared by the estimator API."""

from __future__ import annotations

import numpy as np


def check_images(X) -> np.ndarray:
    """Coerce to a finite float32 batch [N, H, W, 1].

    Accepts [N, H, W] or [N, H, W, 1]; spatial dims must be even (the
    network has one 2x2 pooling stage).
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4 or X.shape[-1] != 1:
        raise ValueError(f"expected images of shape [N,H,W] or [N,H,W,1], got {X.shape}")
    if X.shape[1] % 2 or X.shape[2] % 2:
        raise ValueError(f"image dims must be divisible by 2, got {X.shape[1]}x{X.shape[2]}")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or Inf")
    return X


def check_masks(y, n_classes: int | None = None) -> np.ndarray:
    """Coerce to an integer label batch [N, H, W] with classes in range."""
    y = np.asarray(y)
    if y.ndim != 3:
        raise ValueError(f"expected masks of shape [N,H,W], got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.equal(np.mod(y, 1), 0).all():
            raise ValueError("masks must contain integer class ids")
        y = y.astype(np.int64)
    if y.min(initial=0) < 0:
        raise ValueError("masks contain negative class ids")
    if n_classes is not None and y.max(initial=0) >= n_classes:
        raise ValueError(f"masks contain class {int(y.max())}, expected < {n_classes}")
    return y.astype(np.int64)


def check_paired(X: np.ndarray, y: np.ndarray) -> None:
    if X.shape[0] != y.shape[0] or X.shape[1:3] != y.shape[1:3]:
        raise ValueError(f"images {X.shape} and masks {y.shape} do not align")
