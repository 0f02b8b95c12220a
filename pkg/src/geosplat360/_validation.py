"""Input validation helpers shared by the estimators and free functions."""

from __future__ import annotations

import numpy as np


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


class DivergenceError(RuntimeError):
    """Raised by the scene fitter when the loss blows up."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class NotFittedError(AttributeError, ValueError):
    pass


def check_is_fitted(estimator, attributes):
    if isinstance(attributes, str):
        attributes = [attributes]
    if not all(hasattr(estimator, a) for a in attributes):
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet. "
            "Call 'fit' before using this estimator."
        )


def as_float_array(x, name="array", ndim=None, shape=None, finite=True):
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DomainError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if shape is not None:
        for axis, n in enumerate(shape):
            if n is not None and arr.shape[axis] != n:
                raise DomainError(f"{name} has shape {arr.shape}, expected {shape}")
    if finite and not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def check_plane(x, name="plane", channels=None):
    """Validate an H x W (or H x W x C) image plane and return it as float64."""
    arr = np.asarray(x, dtype=np.float64)
    if channels is None:
        if arr.ndim != 2:
            raise DomainError(f"{name} must be H x W, got shape {arr.shape}")
    else:
        if arr.ndim != 3 or arr.shape[2] != channels:
            raise DomainError(f"{name} must be H x W x {channels}, got shape {arr.shape}")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise DomainError(f"{names[0]} shape {a.shape} does not match {names[1]} shape {b.shape}")


def check_mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise DomainError(f"mask shape {mask.shape} does not match {shape}")
    return mask


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise DomainError(f"{name} must be positive, got {value}")
    return float(value)


def check_non_negative(value, name):
    if not np.isfinite(value) or value < 0:
        raise DomainError(f"{name} must be non-negative, got {value}")
    return float(value)
