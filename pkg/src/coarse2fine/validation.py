"""Input validation helpers shared by the estimator-style classes."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def check_array(X, name="X", ndim=2):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != ndim:
        raise ContractError(f"{name} must be {ndim}-D, got shape {X.shape}")
    if X.size == 0:
        raise ContractError(f"{name} is empty")
    if not np.isfinite(X).all():
        raise ContractError(f"{name} contains non-finite values")
    return X


def check_X_y(X, y):
    X = check_array(X)
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ContractError(f"y must be 1-D with {X.shape[0]} entries, got shape {y.shape}")
    return X, y.astype(np.int64)


def check_fitted(estimator, attr):
    if not hasattr(estimator, attr):
        raise ContractError(f"{type(estimator).__name__} is not fitted")
