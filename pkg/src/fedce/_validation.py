"""Input validation helpers shared across the package."""

from __future__ import annotations

import numbers

import numpy as np


class ConfigError(ValueError):
    """Raised when a configuration or call argument violates a precondition.

    ``field`` names the offending setting when one is known, so command-line
    callers can report it.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ConfigError(f"{name} must be an integer, got {value!r}", name)
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}", name)
    return int(value)


def check_real(value, name: str, low=None, high=None, low_open=False, high_open=False) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ConfigError(f"{name} must be a real number, got {value!r}", name)
    value = float(value)
    if not np.isfinite(value):
        raise ConfigError(f"{name} must be finite, got {value}", name)
    if low is not None and (value < low or (low_open and value == low)):
        bound = ">" if low_open else ">="
        raise ConfigError(f"{name} must be {bound} {low}, got {value}", name)
    if high is not None and (value > high or (high_open and value == high)):
        bound = "<" if high_open else "<="
        raise ConfigError(f"{name} must be {bound} {high}, got {value}", name)
    return value


def check_features(X, d: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ConfigError(f"features must be a 2-D array, got shape {X.shape}")
    if d is not None and X.shape[1] != d:
        raise ConfigError(f"feature dimension {X.shape[1]} does not match model input dimension {d}")
    if not np.all(np.isfinite(X)):
        raise ConfigError("features contain NaN or Inf")
    return X


def check_labels(y, n_classes: int | None = None, n_samples: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ConfigError(f"labels must be 1-D, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ConfigError("labels must be integer class indices")
    y = y.astype(np.int64)
    if n_samples is not None and y.shape[0] != n_samples:
        raise ConfigError(f"got {y.shape[0]} labels for {n_samples} samples")
    if y.size and y.min() < 0:
        raise ConfigError("labels must be non-negative")
    if n_classes is not None and y.size and y.max() >= n_classes:
        raise ConfigError(f"label {int(y.max())} out of range for {n_classes} classes")
    return y
