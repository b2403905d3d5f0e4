# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: one-sided Jacobi rotations and fixed-order matmul.

Mirrors ``salora._fallback`` exactly in algorithm; only the arithmetic
loops are compiled.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, copysign, hypot

cnp.import_array()


def one_sided_jacobi(double[:, ::1] rows, double[:, ::1] vrows,
                     double tol, int max_sweeps):
    """Orthogonalize the rows of ``rows`` in place by row-cyclic Jacobi sweeps.

    Every rotation applied to a pair of rows is applied to the same pair of
    ``vrows``. Returns the number of sweeps performed.
    """
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t m = rows.shape[1]
    cdef Py_ssize_t nv = vrows.shape[1]
    cdef Py_ssize_t p, q, i
    cdef double alpha, beta, gamma, zeta, t, c, s, x, y
    cdef int sweep
    cdef bint rotated
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    x = rows[p, i]
                    y = rows[q, i]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = copysign(1.0, zeta) / (fabs(zeta) + hypot(1.0, zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    x = rows[p, i]
                    y = rows[q, i]
                    rows[p, i] = c * x - s * y
                    rows[q, i] = s * x + c * y
                for i in range(nv):
                    x = vrows[p, i]
                    y = vrows[q, i]
                    vrows[p, i] = c * x - s * y
                    vrows[q, i] = s * x + c * y
        if not rotated:
            return sweep + 1
    return max_sweeps


def matmul(double[:, ::1] a, double[:, ::1] b):
    """Product ``a @ b`` accumulated in ascending inner-index order."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t inner = a.shape[1]
    cdef Py_ssize_t k = b.shape[1]
    cdef Py_ssize_t i, j, l
    cdef double aval
    out = np.zeros((n, k), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        for l in range(inner):
            aval = a[i, l]
            for j in range(k):
                o[i, j] += aval * b[l, j]
    return out
