"""Shared numeric primitives: softmax, entropy, distances, pooling.

All functions are pure and accept numpy arrays of any float dtype; they
preserve the input dtype except where a 64-bit accumulation is noted.
"""

from __future__ import annotations

import numpy as np


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    logits = np.asarray(logits)
    if logits.size == 0:
        raise ValueError("softmax of an empty array")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def entropy(dist: np.ndarray, axis: int = -1) -> np.ndarray | float:
    """Shannon entropy in nats; 0*log(0) counts as 0.

    Accumulates in float64 regardless of input dtype.
    """
    p = np.asarray(dist, dtype=np.float64)
    logp = np.log(np.where(p > 0.0, p, 1.0))
    h = -(p * logp).sum(axis=axis)
    return float(h) if h.ndim == 0 else h


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sqrt((d * d).sum()))


def argmax_tiebreak_low(values: np.ndarray) -> int:
    """Index of the maximum; exact ties go to the smallest index."""
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("argmax of an empty array")
    return int(np.argmax(values))


def global_average_pool(fmap: np.ndarray) -> np.ndarray:
    """Mean over the two spatial axes of an H x W x F map (float64 sums)."""
    fmap = np.asarray(fmap)
    if fmap.ndim != 3 or fmap.size == 0:
        raise ValueError("expected a non-empty H x W x F map")
    return fmap.mean(axis=(0, 1), dtype=np.float64).astype(fmap.dtype)


def is_distribution(p: np.ndarray, tol: float = 1e-6) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(p.ndim == 1 and (p >= 0).all() and abs(p.sum() - 1.0) <= tol)
