"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``."""
import math

import numpy as np


def one_sided_jacobi(rows, vrows, tol, max_sweeps):
    n = rows.shape[0]
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            x = rows[p]
            for q in range(p + 1, n):
                y = rows[q]
                alpha = float(x @ x)
                beta = float(y @ y)
                gamma = float(x @ y)
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                rows[p], rows[q] = c * x - s * y, s * x + c * y
                vp, vq = vrows[p], vrows[q]
                vrows[p], vrows[q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            return sweep + 1
    return max_sweeps


def matmul(a, b):
    return np.dot(a, b)
