"""Small input-validation helpers shared across the package.

These raise ValueError/TypeError with messages that name the offending
argument, so failures surface at the call boundary instead of deep inside
torch ops.
"""

from __future__ import annotations

import numpy as np


def check_positive_int(name, value):
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise TypeError(f"{name} must be an int, got {type(value).__name__}")
    if value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return int(value)


def check_fraction(name, value, *, closed=True):
    value = float(value)
    if closed:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {value}")
    else:
        if not 0.0 < value < 1.0:
            raise ValueError(f"{name} must be in (0, 1), got {value}")
    return value


def check_probability(name, value):
    return check_fraction(name, value, closed=True)


def check_in(name, value, allowed):
    if value not in allowed:
        raise ValueError(f"{name} must be one of {sorted(allowed)}, got {value!r}")
    return value


def check_array(name, arr, *, shape=None, ndim=None, dtype=None):
    arr = np.asarray(arr)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must have ndim={ndim}, got shape {arr.shape}")
    if shape is not None:
        for axis, want in enumerate(shape):
            if want is not None and arr.shape[axis] != want:
                raise ValueError(
                    f"{name} must have shape {shape}, got {arr.shape}"
                )
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return arr


def check_rng(name, rng):
    if not isinstance(rng, np.random.Generator):
        raise TypeError(
            f"{name} must be a numpy.random.Generator, got {type(rng).__name__}"
        )
    return rng
