"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.exceptions import NotFittedError

__all__ = ["NotFittedError", "as_float_array", "check_dims", "as_generator", "check_is_initialized"]


def as_float_array(x, name: str = "input", ndim_min: int = 1) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim < ndim_min:
        raise ValueError(f"{name} must have at least {ndim_min} dimension(s), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_dims(arr: np.ndarray, dim: int, name: str) -> np.ndarray:
    if arr.shape[-1] != dim:
        raise ValueError(f"{name} has trailing dimension {arr.shape[-1]}, expected {dim}")
    return arr


def as_generator(seed) -> np.random.Generator:
    """Turn ``None``, an int, a SeedSequence or a Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise TypeError(f"cannot build a Generator from {type(seed).__name__}")


def check_is_initialized(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not initialized yet; "
            "call initialize() or fit() first."
        )
