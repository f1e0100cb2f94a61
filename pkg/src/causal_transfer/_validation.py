"""Small input checks shared by the estimators."""
import numbers

import numpy as np


def check_probability_vector(p, name="p", atol=1e-12):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-d array, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError(f"{name} must have finite nonnegative entries")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"{name} must sum to 1 (got {p.sum()!r})")
    return p


def check_scalar(x, name, target_type=numbers.Real, min_val=None, max_val=None,
                 include_min=True, include_max=True):
    if not isinstance(x, target_type) or isinstance(x, bool):
        raise TypeError(f"{name} must be {target_type}, got {type(x).__name__}")
    if min_val is not None:
        if (x < min_val) if include_min else (x <= min_val):
            raise ValueError(f"{name} == {x}, must be {'>=' if include_min else '>'} {min_val}")
    if max_val is not None:
        if (x > max_val) if include_max else (x >= max_val):
            raise ValueError(f"{name} == {x}, must be {'<=' if include_max else '<'} {max_val}")
    return x


def check_labels(labels, n_clusters=None):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be 1-d")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integers")
        labels = labels.astype(int)
    labels = labels.astype(int)
    if labels.size and labels.min() < 0:
        raise ValueError("labels must be nonnegative")
    if n_clusters is not None and labels.size and labels.max() >= n_clusters:
        raise ValueError(f"label {labels.max()} out of range for {n_clusters} clusters")
    return labels
