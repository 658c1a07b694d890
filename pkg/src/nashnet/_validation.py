"""Input validation helpers shared across the package."""

import numbers

import numpy as np


def as_vector(x, name="x", dim=None):
    """Return ``x`` as a finite 1-D float array, optionally of length ``dim``."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a vector, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must have at least one entry")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} has dimension {arr.shape[0]}, expected {dim}")
    return arr


def as_matrix(a, name="A", shape=None):
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def check_gamma(gamma, name="gamma"):
    if not isinstance(gamma, numbers.Real) or not (0.0 < float(gamma) <= 1.0):
        raise ValueError(f"{name} must lie in (0, 1], got {gamma!r}")
    return float(gamma)


def check_positive_int(n, name, minimum=1):
    if not isinstance(n, numbers.Integral) or int(n) < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {n!r}")
    return int(n)


def check_weights(weights, n=None, atol=1e-12, name="weights"):
    """Validate a probability vector: nonnegative entries summing to one."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    if n is not None and w.size != n:
        raise ValueError(f"{name} has {w.size} entries, expected {n}")
    if w.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"{name} must be finite and nonnegative")
    if abs(w.sum() - 1.0) > atol:
        raise ValueError(f"{name} must sum to 1 (got {w.sum()!r})")
    return w


def operator_norm(W):
    """Spectral norm (largest singular value) of a matrix."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if W.size == 0:
        return 0.0
    return float(np.linalg.norm(W, 2))
