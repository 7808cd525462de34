"""Slow, loop-based reference implementations used as test oracles.

None of these call into the package; they only use index arithmetic and
plain Python/numpy elementwise operations.
"""

import itertools
import math

import numpy as np


def unfold_by_index(t, n):
    d = t.shape
    others = [k for k in range(3) if k != n - 1]
    out = np.zeros((d[n - 1], d[others[0]] * d[others[1]]))
    for idx in itertools.product(*(range(s) for s in d)):
        j, stride = 0, 1
        for k in others:
            j += idx[k] * stride
            stride *= d[k]
        out[idx[n - 1], j] = t[idx]
    return out


def mode1_product_loops(t, m):
    d1, d2, d3 = t.shape
    out = np.zeros((m.shape[0], d2, d3))
    for j in range(m.shape[0]):
        for i2 in range(d2):
            for i3 in range(d3):
                out[j, i2, i3] = sum(m[j, i1] * t[i1, i2, i3] for i1 in range(d1))
    return out


def frobenius_loops(t):
    return math.sqrt(sum(float(x) * float(x) for x in np.ravel(t)))


def tucker_quadruple_sum(core, u, v, z):
    out = np.zeros((u.shape[0], v.shape[0], z.shape[0]))
    for i, j, k in itertools.product(range(u.shape[0]), range(v.shape[0]), range(z.shape[0])):
        s = 0.0
        for p, q, r in itertools.product(*(range(x) for x in core.shape)):
            s += core[p, q, r] * u[i, p] * v[j, q] * z[k, r]
        out[i, j, k] = s
    return out


def cp_triple_sum(weights, a, b, c):
    out = np.zeros((a.shape[0], b.shape[0], c.shape[0]))
    for i, j, k in itertools.product(range(a.shape[0]), range(b.shape[0]), range(c.shape[0])):
        out[i, j, k] = sum(weights[r] * a[i, r] * b[j, r] * c[k, r] for r in range(len(weights)))
    return out


def jacobi_eigenvalues(sym, tol=1e-15, max_sweeps=100):
    """Cyclic Jacobi rotations on a symmetric matrix; returns eigenvalues descending."""
    a = np.array(sym, dtype=float)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[p, q] ** 2 for p in range(n) for q in range(n) if p != q))
        if off < tol * max(1.0, np.abs(a).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
    return sorted(np.diag(a), reverse=True)


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (``x`` is perturbed in place and restored)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-7):
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def two_pass_stats(xs):
    n = len(xs)
    mean = sum(xs) / n
    var = sum((x - mean) ** 2 for x in xs) / n
    return mean, var, max(xs) / mean
