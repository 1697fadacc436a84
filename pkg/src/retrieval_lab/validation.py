"""Input validation helpers and shared exception types."""

from __future__ import annotations

import numpy as np


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ConfigError(ValueError):
    """A run configuration is malformed; the message names the offending key."""


class BudgetError(RuntimeError):
    """A configured resource budget would be exceeded."""


class TrainingDivergedError(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training loss became non-finite at step {step}: {loss!r}")
        self.step = step
        self.loss = loss


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DomainError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must have finite entries")
    return arr


def as_vector(a, name: str = "vector") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise DomainError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    return arr


def check_distribution(p, name: str = "distribution", atol: float = 1e-9) -> np.ndarray:
    arr = as_vector(p, name)
    if arr.size == 0:
        raise DomainError(f"{name} must be non-empty")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must have finite non-negative entries")
    total = float(np.sum(arr))
    if abs(total - 1.0) > atol:
        raise DomainError(f"{name} must sum to 1, got {total!r}")
    return arr


def check_positive(value, name: str) -> float:
    v = float(value)
    if not np.isfinite(v) or v <= 0:
        raise DomainError(f"{name} must be positive, got {value!r}")
    return v


def check_count(value, name: str, minimum: int = 1) -> int:
    v = int(value)
    if v != value or v < minimum:
        raise DomainError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return v


def check_index(value, name: str, size: int) -> int:
    v = int(value)
    if v != value or not 0 <= v < size:
        raise DomainError(f"{name} must be in [0, {size}), got {value!r}")
    return v


def check_unit_interval(value, name: str) -> float:
    v = float(value)
    if not np.isfinite(v) or not 0.0 <= v <= 1.0:
        raise DomainError(f"{name} must lie in [0, 1], got {value!r}")
    return v
