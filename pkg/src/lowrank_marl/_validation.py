"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numbers

import numpy as np


def check_tensor(t, name: str = "tensor") -> np.ndarray:
    """Return ``t`` as a finite float ndarray in C order."""
    arr = np.ascontiguousarray(t, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_same_shape(a, b):
    a = check_tensor(a, "a")
    b = check_tensor(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def check_mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask)
    if m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match tensor shape {tuple(shape)}")
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask entries must be 0 or 1")
    return m.astype(float)


def check_rank(rank) -> int:
    if not isinstance(rank, numbers.Integral) or rank < 1:
        raise ValueError(f"rank must be a positive integer, got {rank!r}")
    return int(rank)


def check_rng(seed) -> np.random.Generator:
    """Turn ``None``, an int or a Generator into a :class:`numpy.random.Generator`."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
