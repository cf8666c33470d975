"""Input validation helpers shared by the functional API and the estimators."""

from __future__ import annotations

import numpy as np


class NotFittedError(ValueError, AttributeError):
    """Raised when a fitted attribute is requested before ``fit``."""


def check_component(i, m: int) -> int:
    if isinstance(i, (bool, np.bool_)) or not isinstance(i, (int, np.integer)):
        raise TypeError(f"component index must be an integer, got {i!r}")
    if not 0 <= i < m:
        raise IndexError(f"component index {i} outside 0..{m - 1}")
    return int(i)


def check_finite(a, name: str = "array") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_points(x, d: int) -> np.ndarray:
    x = check_finite(np.atleast_1d(np.asarray(x, dtype=float)), "x")
    if x.shape[-1] != d:
        raise ValueError(f"points must have {d} coordinates, got shape {x.shape}")
    return x


def check_grid_function(values, grid, name: str = "grid function") -> np.ndarray:
    """Validate an array of shape ``(m, N[, N])`` against ``grid``."""
    values = np.asarray(values, dtype=float)
    expected = (grid.m,) + grid.shape
    if values.shape != expected:
        raise ValueError(f"{name} has shape {values.shape}, expected {expected}")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} contains non-finite values")
    return values


def check_is_fitted(estimator, attributes) -> None:
    if isinstance(attributes, str):
        attributes = [attributes]
    missing = [a for a in attributes if not hasattr(estimator, a)]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit before using {', '.join(missing)}"
        )
