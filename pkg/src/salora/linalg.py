"""Dense float64 linear algebra used by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The SVD
is a one-sided cyclic Jacobi iteration; its rotation loop and the matrix
product run in the compiled kernel when available (see ``_backend``).
"""
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .errors import RankError, ShapeError, ValidationError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60


def as_matrix(m, name="matrix"):
    """Validate ``m`` as a finite 2-D float64 array and return a C-contiguous copy-or-view."""
    arr = np.ascontiguousarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = u @ diag(s) @ v.T``."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def __iter__(self):
        return iter((self.u, self.s, self.v))

    def reconstruct(self):
        return matmul(self.u * self.s, self.v.T)


def matmul(a, b):
    """Matrix product with a fixed summation order.

    Raises ShapeError naming both shapes when ``a.cols != b.rows``.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return kernels.matmul(a, b)


def frobenius_norm(m):
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def _complete_basis(u, bad):
    # Replace columns flagged in `bad` with unit vectors orthogonal to the rest,
    # picked from the standard basis by largest residual (lowest index on ties).
    m = u.shape[0]
    good = [j for j in range(u.shape[1]) if not bad[j]]
    for j in range(u.shape[1]):
        if not bad[j]:
            continue
        basis = u[:, good]
        cand = np.eye(m)
        for _ in range(2):
            cand = cand - basis @ (basis.T @ cand)
        norms = np.sqrt(np.sum(cand * cand, axis=0))
        i = int(np.argmax(norms))
        u[:, j] = cand[:, i] / norms[i]
        good.append(j)
    return u


def _jacobi_tall(m):
    # m has rows >= cols; returns unsorted (u, s, v) with orthonormal u.
    rows = np.array(m.T, dtype=np.float64, order="C")
    n = rows.shape[0]
    vrows = np.eye(n)
    kernels.one_sided_jacobi(rows, vrows, JACOBI_TOL, JACOBI_MAX_SWEEPS)
    s = np.sqrt(np.sum(rows * rows, axis=1))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    rows = rows[order]
    v = vrows[order].T.copy()
    smax = s[0] if s.size else 0.0
    bad = s <= smax * max(m.shape) * np.finfo(np.float64).eps
    if smax == 0.0:
        bad[:] = True
    safe = np.where(bad, 1.0, s)
    u = (rows / safe[:, None]).T.copy()
    if bad.any():
        u = _complete_basis(u, bad)
    return u, s, v


def svd(m):
    """Thin SVD by one-sided cyclic Jacobi.

    Returns ``SvdResult`` with ``k = min(rows, cols)`` columns, singular
    values descending, and each column of ``u`` signed so its largest-magnitude
    entry (lowest row on ties) is non-negative; ``v`` is flipped to match.
    """
    m = as_matrix(m)
    if min(m.shape) < 1:
        raise ShapeError(f"svd needs a non-empty matrix, got {m.shape}")
    if m.shape[0] >= m.shape[1]:
        u, s, v = _jacobi_tall(m)
    else:
        v, s, u = _jacobi_tall(m.T)
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u = np.ascontiguousarray(u * signs)
    v = np.ascontiguousarray(v * signs)
    return SvdResult(u, s, v)


def top_left_singular_vectors(m, k):
    """First ``k`` columns of ``svd(m).u``."""
    m = as_matrix(m)
    if not 1 <= k <= min(m.shape):
        raise RankError(f"k={k} outside [1, {min(m.shape)}] for shape {m.shape}")
    return np.ascontiguousarray(svd(m).u[:, :k])


def min_singular_value(m):
    return float(svd(m).s[-1])


def numerical_rank(s, rel_tol):
    """Count singular values above ``rel_tol * max(s)``."""
    s = np.asarray(s)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))
