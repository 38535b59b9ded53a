"""Helper functions with some vector math.

    Everything works on numpy arrays whose last axis is the vector axis, so the
    same call handles one vector of shape (m,) or a batch of shape (N, m).
"""
from typing import Sequence, Union

import numpy as np

from .exceptions import DimensionMismatchError

# small enough for unit-scale quantities, large enough to absorb float noise
EPSILON = 1.0e-12

ArrayLike = Union[float, Sequence[float], np.ndarray]


def asVector(x: ArrayLike, dim: int) -> np.ndarray:
    """Return x as a float array and check its trailing dimension."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape[-1] != dim:
        raise DimensionMismatchError(
            f"Expected vectors of dimension {dim}, got shape {arr.shape}"
        )
    return arr


def vecDot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return the dot product along the last axis."""
    return np.einsum("...i,...i->...", a, b)


def vecLenSq(a: np.ndarray) -> np.ndarray:
    """Return the vector's magnitude squared."""
    return vecDot(a, a)


def vecLen(a: np.ndarray) -> np.ndarray:
    """Return the vector's magnitude."""
    return np.sqrt(vecLenSq(a))


def vecNormalize(a: np.ndarray) -> np.ndarray:
    """Normalize the vectors (i.e. make their magnitude 1), zero stays zero."""
    length = vecLen(a)[..., None]
    return np.where(length > EPSILON, a / np.maximum(length, EPSILON), 0.0)


def matVec(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply (a batch of) matrices to (a batch of) vectors."""
    return np.einsum("...ij,...j->...i", mat, x)


def matTVec(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply the transposed (batch of) matrices to (a batch of) vectors."""
    return np.einsum("...ji,...j->...i", mat, x)
