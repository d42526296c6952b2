"""Input validation helpers and error types shared across the package."""

from __future__ import annotations

import zlib

import numpy as np


class InvalidArgumentError(ValueError):
    """Raised when an argument violates a documented precondition."""


class DegenerateInputError(ValueError):
    """Raised for inputs that make a quantity undefined (e.g. a zero column)."""


class CapacityError(RuntimeError):
    """Raised when a request exceeds a combinatorial or pool capacity."""


class NumericalFailureError(ArithmeticError):
    """Raised when an iterative solver produces non-finite values."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


def check_vector(x, name="x", length=None):
    """Return ``x`` as a finite 1-D float64 array, optionally of fixed length."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"{name} must be 1-D, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise InvalidArgumentError(
            f"{name} has length {arr.shape[0]}, expected {length}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def check_matrix(M, name="M"):
    arr = np.asarray(M, dtype=np.float64)
    if arr.ndim != 2 or min(arr.shape) < 1:
        raise InvalidArgumentError(f"{name} must be a non-empty 2-D array")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def derive_seed(*parts):
    """Deterministic 63-bit seed from integers and strings.

    Strings are folded through CRC-32 so the result does not depend on
    ``PYTHONHASHSEED``.
    """
    entropy = []
    for p in parts:
        if isinstance(p, str):
            entropy.append(zlib.crc32(p.encode("utf-8")))
        else:
            entropy.append(int(p) & 0xFFFFFFFFFFFFFFFF)
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
