"""Small input-checking helpers shared across modules."""

import numpy as np


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return float(value)


def check_nonnegative(value, name):
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be non-negative, got {value!r}")
    return float(value)


def check_volume(array, dims, name, dtype=None):
    array = np.asarray(array, dtype=dtype)
    if array.shape != tuple(dims):
        raise ValueError(f"{name} has shape {array.shape}, expected {tuple(dims)}")
    return array


def check_same_grid(a, b):
    if a != b:
        raise ValueError(f"grid mismatch: {a} vs {b}")
