"""Independent reference implementations used only by the tests.

None of these call into ``salora``; they are deliberately slow and plain.
"""
import math

import numpy as np


def naive_matmul(a, b):
    rows, inner = len(a), len(a[0])
    cols = len(b[0])
    assert len(b) == inner
    out = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for k in range(inner):
                acc += a[i][k] * b[k][j]
            out[i][j] = acc
    return np.array(out)


def jacobi_eigh(sym, tol=1e-14, max_sweeps=100):
    """Classical two-sided cyclic Jacobi for a symmetric matrix.

    Returns (eigenvalues descending, eigenvectors as columns).
    """
    a = [list(map(float, row)) for row in sym]
    n = len(a)
    v = [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[i][j] ** 2 for i in range(n) for j in range(n) if i != j))
        scale = math.sqrt(sum(a[i][i] ** 2 for i in range(n))) or 1.0
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p][q] == 0.0:
                    continue
                theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp, akq = a[k][p], a[k][q]
                    a[k][p] = c * akp - s * akq
                    a[k][q] = s * akp + c * akq
                for k in range(n):
                    apk, aqk = a[p][k], a[q][k]
                    a[p][k] = c * apk - s * aqk
                    a[q][k] = s * apk + c * aqk
                for k in range(n):
                    vkp, vkq = v[k][p], v[k][q]
                    v[k][p] = c * vkp - s * vkq
                    v[k][q] = s * vkp + c * vkq
    vals = np.array([a[i][i] for i in range(n)])
    order = np.argsort(-vals, kind="stable")
    return vals[order], np.array(v)[:, order]


def gram_singular_values(m):
    """Singular values of ``m`` as square roots of the Gram matrix eigenvalues."""
    m = np.asarray(m, dtype=float)
    gram = naive_matmul(m.T.tolist(), m.tolist()) if m.shape[0] >= m.shape[1] else naive_matmul(m.tolist(), m.T.tolist())
    vals, _ = jacobi_eigh(gram)
    return np.sqrt(np.clip(vals, 0.0, None))


def power_iteration_subspace(m, k, iters=2000, seed=0):
    """Top-k left singular directions of ``m`` by power iteration on m m^T with deflation."""
    m = np.asarray(m, dtype=float)
    gram = m @ m.T
    rng = np.random.default_rng(seed)
    vecs = []
    for _ in range(k):
        x = rng.standard_normal(gram.shape[0])
        for _ in range(iters):
            for u in vecs:
                x = x - u * (u @ x)
            x = gram @ x
            x /= np.linalg.norm(x)
        vecs.append(x)
    return np.column_stack(vecs)


def principal_angles(a, b):
    """Principal angles (radians) between the column spans of orthonormal a and b."""
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    # sines from the residual: accurate for small angles, unlike arccos
    sin = np.linalg.svd(qb - qa @ (qa.T @ qb), compute_uv=False)
    return np.arcsin(np.clip(sin, 0.0, 1.0))


def scalar_forward(weights, x, activation):
    """Scalar-by-scalar forward pass of a plain chained model."""
    act = {"tanh": math.tanh, "relu": lambda t: max(t, 0.0), "identity": lambda t: t}[activation]
    cols = [list(map(float, x[:, j])) for j in range(x.shape[1])]
    outs = []
    for h in cols:
        for layer, w in enumerate(weights):
            z = []
            for i in range(w.shape[0]):
                acc = 0.0
                for k in range(w.shape[1]):
                    acc += float(w[i, k]) * h[k]
                z.append(acc)
            h = [act(t) for t in z] if layer < len(weights) - 1 else z
        outs.append(h)
    return np.array(outs).T


def central_difference(f, p, h=1e-5):
    """Gradient of scalar ``f()`` with respect to array ``p`` (mutated and restored in place)."""
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        orig = p[idx]
        p[idx] = orig + h
        plus = f()
        p[idx] = orig - h
        minus = f()
        p[idx] = orig
        g[idx] = (plus - minus) / (2.0 * h)
    return g


def random_complement_projector(rng, d, k):
    q, _ = np.linalg.qr(rng.standard_normal((d, k)))
    return np.eye(d) - q @ q.T
