"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_square(m: np.ndarray, name: str) -> np.ndarray:
    m = as_float_array(m, name, ndim=2)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    return m


def check_symmetric(m, name: str, tol: float = 1e-10) -> np.ndarray:
    m = check_square(m, name)
    if m.size and float(np.max(np.abs(m - m.T))) > tol:
        raise ValueError(f"{name} is not symmetric within {tol:g}")
    return m


def check_labels(y, n_classes: int, name: str = "labels") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional")
    if arr.size and (not np.issubdtype(arr.dtype, np.integer)):
        rounded = np.rint(arr)
        if not np.array_equal(rounded, arr):
            raise ValueError(f"{name} must be integer class indices")
        arr = rounded
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValueError(f"{name} must lie in [0, {n_classes})")
    return arr


def check_probability_rows(p, name: str, tol: float = 1e-9) -> np.ndarray:
    p = as_float_array(p, name, ndim=2)
    if p.size == 0:
        raise ValueError(f"{name} is empty")
    if p.min() < 0.0:
        raise ValueError(f"{name} has negative entries")
    sums = p.sum(axis=1)
    worst = float(np.max(np.abs(sums - 1.0)))
    if worst > tol:
        raise ValueError(f"{name} rows must sum to 1 within {tol:g} (worst deviation {worst:.3g})")
    return p


def check_seed(seed: int, name: str = "seed") -> int:
    if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool) or seed < 0:
        raise ValueError(f"{name} must be a non-negative integer")
    return int(seed)
