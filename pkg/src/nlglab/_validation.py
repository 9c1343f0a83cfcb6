"""Input checking shared by the estimators and the functional API."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_batch(x, dim=None, name="x"):
    """Return ``(2-D float64 array, was_1d)`` after finiteness and width checks."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = check_array(np.atleast_2d(arr), dtype=np.float64, ensure_all_finite=True,
                      input_name=name, copy=False)
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"{name} has dim {arr.shape[1]}, expected {dim}")
    return arr, single


def check_labels(y, n):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.round(y)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0):
        raise ValueError("labels must be nonnegative")
    return y.astype(np.int64)


def check_finite(arr, what, step=None):
    from .errors import NumericalFailure
    if not np.all(np.isfinite(arr)):
        raise NumericalFailure(f"non-finite {what}", step=step)


def check_positive(value, name):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value
