"""Stable log-domain reductions, factorizations, and gradient checking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import DomainError, as_matrix


def logsumexp(values, axis=None):
    """log(sum(exp(values))) via max-shift; never overflows on finite input.

    Accepts -inf entries (they contribute zero mass); rejects NaN and +inf.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DomainError("logsumexp requires a non-empty input")
    if np.isnan(arr).any() or np.any(arr == np.inf):
        raise DomainError("logsumexp input must be NaN-free and below +inf")
    shift = np.max(arr, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(arr - shift), axis=axis, keepdims=True)) + shift
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_softmax(values, axis=-1):
    """Row-wise log softmax; tolerates -inf entries (zero probability)."""
    arr = np.asarray(values, dtype=np.float64)
    lse = logsumexp(arr, axis=axis)
    return arr - np.expand_dims(lse, axis) if arr.ndim > 0 else arr - lse


def softmax(values, axis=-1):
    return np.exp(log_softmax(values, axis=axis))


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD with singular values sorted descending."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def svd(a) -> SvdResult:
    arr = as_matrix(a, "svd input")
    u, s, vt = np.linalg.svd(arr, full_matrices=False)
    return SvdResult(u=u, s=s, vt=vt)


def numerical_rank(a, tol: float = 1e-8) -> int:
    """Number of singular values above tol times the largest one."""
    if tol <= 0:
        raise DomainError(f"tol must be positive, got {tol!r}")
    s = svd(a).s
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def finite_diff_grad(f, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector."""
    if h <= 0:
        raise DomainError(f"step h must be positive, got {h!r}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    base = x.copy().reshape(-1)
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + h
        hi = f(base.reshape(x.shape))
        base[i] = orig - h
        lo = f(base.reshape(x.shape))
        base[i] = orig
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


def gradient_relative_error(analytic, numeric) -> float:
    """Scale-aware distance between two gradient vectors."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-8)
    return float(np.linalg.norm(a - b)) / denom


def pack_arrays(arrays: dict[str, np.ndarray]) -> tuple[np.ndarray, list[tuple[str, tuple[int, ...]]]]:
    """Flatten an ordered dict of arrays into one vector plus a shape spec."""
    layout = [(name, arr.shape) for name, arr in arrays.items()]
    if not layout:
        return np.zeros(0), layout
    flat = np.concatenate([np.asarray(arr, dtype=np.float64).reshape(-1) for arr in arrays.values()])
    return flat, layout


def unpack_arrays(vector: np.ndarray, layout) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    pos = 0
    for name, shape in layout:
        size = int(np.prod(shape)) if shape else 1
        out[name] = np.asarray(vector[pos : pos + size], dtype=np.float64).reshape(shape)
        pos += size
    return out
