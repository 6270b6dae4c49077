"""Input validation helpers used by the public functions and estimators."""
from __future__ import annotations

import numbers

import numpy as np

from .exceptions import InvalidInputError


def as_1d_float(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def as_2d_float(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def check_positive(value, name: str, strict: bool = True) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise InvalidInputError(f"{name} must be a finite real number, got {value!r}")
    if strict and value <= 0:
        raise InvalidInputError(f"{name} must be > 0, got {value}")
    if not strict and value < 0:
        raise InvalidInputError(f"{name} must be >= 0, got {value}")
    return float(value)


def check_strictly_increasing(arr: np.ndarray, name: str) -> None:
    if arr.size > 1 and not np.all(np.diff(arr) > 0):
        raise InvalidInputError(f"{name} must be strictly increasing")


def check_same_length(a: np.ndarray, b: np.ndarray, names: str) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"{names} must have equal length ({a.size} != {b.size})")


def readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr
