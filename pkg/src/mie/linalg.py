"""Dense float64 matrix/vector kernels and a symmetric eigendecomposition.

Matrices are 2-d float64 arrays (row-major), vectors are 1-d float64
arrays. The covariance matrices decomposed here are symmetric PSD by
construction, so their singular value decomposition coincides with the
eigendecomposition; `sym_eigen` is the single factorization used
throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError

__all__ = [
    "SymEigenResult",
    "as_matrix",
    "as_vector",
    "matmul",
    "mean_rows",
    "outer",
    "sym_eigen",
]

# Residual bound for accepting an eigendecomposition, relative to
# max(1, ||A||_F).
_RECON_TOL = 1e-8
# Eigenvalues more negative than -tol * ||A||_F are genuine and kept.
_CLAMP_TOL = 1e-10


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Validate and return `v` as a finite 1-d float64 array."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a finite 2-d float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SymEigenResult:
    """Eigendecomposition A = V diag(eigenvalues) V^T.

    eigenvalues are sorted descending; eigenvectors holds the matching
    unit eigenvectors as columns.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def sym_eigen(a) -> SymEigenResult:
    """Eigendecompose a symmetric matrix.

    Eigenvalues come back in descending order. Each eigenvector column is
    sign-fixed so its largest-magnitude component is non-negative, which
    keeps results reproducible across runs. Negative eigenvalues that are
    round-off artifacts (|lambda| <= 1e-10 * ||A||_F) are clamped to zero
    so PSD inputs stay PSD downstream.
    """
    arr = as_matrix(a, "sym_eigen input")
    n, m = arr.shape
    if n != m:
        raise ValidationError(f"sym_eigen needs a square matrix, got {n}x{m}")
    norm = float(np.linalg.norm(arr))
    asym = float(np.linalg.norm(arr - arr.T))
    if asym > 1e-9 * max(1.0, norm):
        raise ValidationError(
            f"sym_eigen input is not symmetric: ||A - A^T||_F = {asym:.3e}"
        )
    # Work on the symmetrized matrix so tiny asymmetries cannot leak in.
    sym = 0.5 * (arr + arr.T)
    try:
        evals, evecs = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition did not converge: {exc}") from exc

    order = np.argsort(evals, kind="stable")[::-1]
    evals = evals[order].copy()
    evecs = evecs[:, order].copy()

    # Deterministic sign: largest-|.| component of each column >= 0.
    for j in range(n):
        col = evecs[:, j]
        lead = int(np.argmax(np.abs(col)))
        if col[lead] < 0.0:
            evecs[:, j] = -col

    tiny = evals < 0.0
    tiny &= np.abs(evals) <= _CLAMP_TOL * norm
    evals[tiny] = 0.0

    residual = float(np.linalg.norm(sym - (evecs * evals) @ evecs.T))
    if residual > _RECON_TOL * max(1.0, norm):
        raise NumericError(
            f"eigendecomposition residual {residual:.3e} exceeds tolerance"
        )
    return SymEigenResult(eigenvalues=evals, eigenvectors=evecs)


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    left = as_matrix(a, "matmul left operand")
    right = as_matrix(b, "matmul right operand")
    if left.shape[1] != right.shape[0]:
        raise ValidationError(
            f"matmul shape mismatch: {left.shape} by {right.shape}"
        )
    return left @ right


def outer(u, v) -> np.ndarray:
    """Outer product u v^T."""
    return np.outer(as_vector(u, "outer u"), as_vector(v, "outer v"))


def mean_rows(z) -> np.ndarray:
    """Column-wise mean of a non-empty matrix."""
    arr = as_matrix(z, "mean_rows input")
    if arr.shape[0] < 1:
        raise ValidationError("mean_rows needs at least one row")
    return arr.mean(axis=0)
