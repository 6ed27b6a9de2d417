"""Input validation helpers used at module boundaries.

All helpers return validated ``float64`` ndarrays (copying only when needed)
or raise one of the package exceptions.
"""

import numpy as np

from .exceptions import DimensionMismatchError, NotSymmetricError


def check_matrix(a, name="matrix"):
    """Validate a dense real matrix: 2D, at least 1x1, all entries finite."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-dimensional, got ndim={a.ndim}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionMismatchError(f"{name} must be at least 1x1, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return a


def check_vector(v, name="vector", length=None):
    """Validate a 1D real vector with finite entries and optional length."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise DimensionMismatchError(f"{name} must be 1-dimensional, got ndim={v.ndim}")
    if length is not None and v.shape[0] != length:
        raise DimensionMismatchError(
            f"{name} must have length {length}, got {v.shape[0]}"
        )
    if not np.isfinite(v).all():
        raise ValueError(f"{name} contains non-finite entries")
    return v


def check_square(a, name="matrix"):
    """Validate a square dense matrix."""
    a = check_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatchError(f"{name} must be square, got shape {a.shape}")
    return a


def check_symmetric(a, tol=1e-10, name="matrix"):
    """Validate symmetry to a relative tolerance and return the matrix.

    Asymmetry is measured as max|A - A^T| relative to max|A| (absolute for
    the zero matrix).
    """
    a = check_square(a, name)
    scale = np.abs(a).max()
    dev = np.abs(a - a.T).max()
    if dev > tol * max(scale, 1.0):
        raise NotSymmetricError(
            f"{name} is not symmetric: max deviation {dev:.3e} vs scale {scale:.3e}"
        )
    return a


def check_2d_samples(X, name="X", n_features=None):
    """Validate a (n_samples, n_features) sample block, promoting 1D to a row."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-dimensional, got ndim={X.ndim}")
    if n_features is not None and X.shape[1] != n_features:
        raise DimensionMismatchError(
            f"{name} must have {n_features} columns, got {X.shape[1]}"
        )
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite entries")
    return X
