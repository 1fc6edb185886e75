"""Input validation helpers shared by the numeric modules.

All numeric entry points accept either a bare ``numpy`` array or any object
exposing a ``.data`` array attribute (e.g. :class:`xmatch.io.EmbeddingMatrix`)
and normalize to 64-bit contiguous arrays before computing.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidLambda,
    InvalidTemperature,
    NonFiniteValue,
)


def as_features(x, name: str = "features") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array.

    Accepts ndarrays or wrappers with a ``.data`` attribute.
    """
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name} contains NaN or Inf")
    return np.ascontiguousarray(arr)


def check_same_dim(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(
            f"{what} disagree in feature dimension: {a.shape[1]} vs {b.shape[1]}"
        )


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"{what} disagree in shape: {a.shape} vs {b.shape}")


def check_temperature(tau: float) -> float:
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0.0:
        raise InvalidTemperature(f"temperature must be > 0, got {tau}")
    return tau


def check_soften_factor(lam: float) -> float:
    lam = float(lam)
    if not np.isfinite(lam) or not (0.0 < lam < 1.0):
        raise InvalidLambda(f"soften factor must be in (0, 1), got {lam}")
    return lam


def check_unit_rows(x: np.ndarray, name: str = "features", atol: float = 1e-5) -> None:
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > atol)
    if bad.size:
        raise NonFiniteValue(
            f"{name} rows {bad[:5].tolist()} are not unit-norm (|n-1| up to "
            f"{np.abs(norms - 1.0).max():.3g})"
        )


def row_softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stable row-wise softmax; ``-inf`` entries map to exact 0."""
    m = np.max(z, axis=1, keepdims=True)
    # rows that are all -inf would produce nan; callers guard against that
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def row_log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    return shifted - lse
