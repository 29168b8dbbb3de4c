"""Dense float64 matrix kernel.

SVD-backed Moore-Penrose pseudo-inverse, cosine similarity matrices and
numerically stable reductions. Everything downstream (extrapolation,
losses, training) builds on the handful of operations defined here.

All routines work on plain 2-D ``numpy`` arrays in row-major float64;
``ensure_matrix`` is the single entry point that validates shape,
dtype and finiteness.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np


class NumericalFailure(RuntimeError):
    """A numerical routine could not produce a trustworthy result."""


#: Annotation alias: a 2-D, C-contiguous float64 array.
Matrix = np.ndarray


def ensure_matrix(a, name: str = "matrix") -> Matrix:
    """Validate and coerce ``a`` into a finite 2-D float64 array.

    Raises ValueError for wrong rank or non-finite entries.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


class SvdFactors(NamedTuple):
    """Thin SVD ``a = u @ diag(singular_values) @ vt``.

    u is m x r, vt is r x n with r = min(m, n); singular values are
    nonnegative and sorted nonincreasing.
    """

    u: Matrix
    singular_values: np.ndarray
    vt: Matrix


def svd(a) -> SvdFactors:
    """Thin singular value decomposition of a finite matrix.

    Deterministic for fixed input (LAPACK backend at a fixed thread
    count). Raises NumericalFailure if the iteration does not converge.
    """
    arr = ensure_matrix(a)
    try:
        u, s, vt = np.linalg.svd(arr, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(
            f"SVD did not converge for {arr.shape[0]}x{arr.shape[1]} matrix"
        ) from exc
    return SvdFactors(u=u, singular_values=s, vt=vt)


def pinv(a, rel_tol: float = 1e-12) -> Matrix:
    """Moore-Penrose pseudo-inverse via SVD.

    Singular values below ``rel_tol * s_max`` are treated as zero, which
    makes rank-deficient inputs land on the minimum-norm least-squares
    inverse instead of blowing up. A zero matrix maps to the zero matrix
    of transposed shape.
    """
    if rel_tol <= 0:
        raise ValueError(f"rel_tol must be positive, got {rel_tol}")
    u, s, vt = svd(a)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((vt.shape[1], u.shape[0]))
    cutoff = rel_tol * s[0]
    inv_s = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    # A+ = V diag(1/s) U^T
    return (vt.T * inv_s) @ u.T


def cosine_sim_matrix(a, b) -> Matrix:
    """Pairwise similarities: entry (i, j) = dot(a_i, b_j).

    Rows are expected to be unit-norm (enforced by the encoders), so the
    dot product is the cosine.
    """
    a = ensure_matrix(a, "a")
    b = ensure_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"dimension mismatch: a is {a.shape}, b is {b.shape}"
        )
    return a @ b.T


def log_sum_exp(values: Sequence[float]) -> float:
    """Max-shifted log(sum(exp(values))); exact for a single element."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("log_sum_exp requires a nonempty sequence")
    m = float(arr.max())
    return m + math.log(float(np.exp(arr - m).sum()))


def frobenius_sq(a) -> float:
    """Sum of squared entries (squared Frobenius norm)."""
    arr = ensure_matrix(a)
    flat = arr.ravel()
    return float(flat @ flat)
