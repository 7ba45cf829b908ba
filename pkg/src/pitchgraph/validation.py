"""Small input-validation helpers used by the estimator-style classes."""

import numpy as np

from .errors import ContractError


def as_float_array(X, name="X", ndim=None):
    """Coerce to a float64 array, rejecting non-finite values."""
    arr = np.asarray(X, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ContractError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


def check_histograms(X, name="X"):
    """Validate a (n, d) stack of L1-normalized histograms."""
    arr = as_float_array(X, name=name)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ContractError(f"{name} must be a 2-d stack of histograms, got shape {arr.shape}")
    if np.any(arr < 0):
        raise ContractError(f"{name} has negative bins")
    sums = arr.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ContractError(f"{name} rows are not L1-normalized (max |sum-1| = {np.abs(sums - 1).max():.3g})")
    return arr


def check_fitted(estimator, attr):
    if not hasattr(estimator, attr):
        raise ContractError(f"{type(estimator).__name__} is not fitted (missing {attr!r}); call fit first")
