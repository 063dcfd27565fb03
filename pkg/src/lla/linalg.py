"""Small dense linear algebra and Hadamard constructions.

Matrices are plain 2-D ``numpy.float32`` arrays.  Products accumulate in
float64 and are rounded back to float32 once, which keeps results
bit-reproducible for a given numpy/BLAS build.
"""

from __future__ import annotations

import numpy as np

from .errors import ResourceError, ShapeError, UnsupportedDimensionError
from .rng import SplitMix64

MAX_HADAMARD_EXPONENT = 14


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float32)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise ValueError("matmul produced non-finite values")
    return out


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float32)


def permutation_matrix(order) -> np.ndarray:
    """Matrix ``P`` with ``(x @ P)[t] == x[order[t]]``."""
    order = np.asarray(order, dtype=np.int64)
    n = order.size
    p = np.zeros((n, n), dtype=np.float32)
    p[order, np.arange(n)] = 1.0
    return p


def sylvester_hadamard(k: int) -> np.ndarray:
    if k < 0:
        raise ValueError("exponent must be non-negative")
    if k > MAX_HADAMARD_EXPONENT:
        raise ResourceError(f"2**{k} exceeds the supported Hadamard order 2**{MAX_HADAMARD_EXPONENT}")
    h = np.ones((1, 1), dtype=np.float32)
    for _ in range(k):
        h = np.block([[h, h], [h, -h]])
    return h


def hadamard_signs(n: int, seed: int) -> np.ndarray:
    """Diagonal of the random sign matrix used by :func:`randomized_hadamard`."""
    return SplitMix64(seed).signs(n).astype(np.float32)


def randomized_hadamard(n: int, seed: int) -> np.ndarray:
    """``(1/sqrt(n)) * diag(signs) @ H_n``, an orthogonal matrix.

    Applied to row vectors (``z @ M``) the signs act first, then the
    transform, then the scale.
    """
    if not is_power_of_two(n):
        raise UnsupportedDimensionError(f"Hadamard order {n} is not a power of two")
    h = sylvester_hadamard(n.bit_length() - 1).astype(np.float64)
    d = hadamard_signs(n, seed).astype(np.float64)
    return (d[:, None] * h / np.sqrt(n)).astype(np.float32)


def fwht_apply(v) -> np.ndarray:
    """Unnormalised fast Walsh-Hadamard transform along the last axis.

    Equals ``v @ H_n`` (``H_n`` is symmetric) in ``n log2 n`` additions.
    Accepts a vector or a 2-D batch of row vectors.
    """
    x = np.array(v, dtype=np.float64)
    n = x.shape[-1]
    if not is_power_of_two(n):
        raise ShapeError(f"FWHT length {n} is not a power of two")
    lead = x.shape[:-1]
    h = 1
    while h < n:
        x = x.reshape(*lead, n // (2 * h), 2, h)
        a = x[..., 0, :].copy()
        b = x[..., 1, :]
        x[..., 0, :] = a + b
        x[..., 1, :] = a - b
        x = x.reshape(*lead, n)
        h *= 2
    return x.astype(np.float32)


def orthogonality_defect(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"orthogonality defect needs a square matrix, got {m.shape}")
    return float(np.max(np.abs(m @ m.T - np.eye(m.shape[0]))))
