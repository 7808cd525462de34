"""Dense multilinear algebra for order-3 tensors.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Modes are
numbered 1, 2, 3 so that ``mode_n_product(t, u, 1)`` reads like ``t x_1 u``.

Unfoldings follow the Kolda-Bader column ordering: for mode ``n`` the
entry ``t[i1, i2, i3]`` lands in row ``i_n`` and column
``sum_{k != n} i_k * J_k`` with ``J_k = prod_{m < k, m != n} d_m``, i.e. the
remaining indices vary in Fortran order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cptr.errors import DomainError, RankError, ShapeError

__all__ = [
    "CPFactors",
    "TuckerFactors",
    "as_tensor",
    "cp_als",
    "cp_reconstruct",
    "frobenius_norm",
    "hooi",
    "hosvd",
    "leading_left_singular_vectors",
    "mode_n_fold",
    "mode_n_product",
    "mode_n_unfold",
    "relative_error",
    "svd_thin",
    "tucker_core",
    "tucker_reconstruct",
]

CP_RIDGE = 1e-12


def as_tensor(data, order: int | None = None) -> np.ndarray:
    """Validate ``data`` as a dense real tensor and return a float64 copy."""
    t = np.array(data, dtype=np.float64)
    if not 1 <= t.ndim <= 4:
        raise ShapeError(f"tensor order must be 1..4, got {t.ndim}")
    if order is not None and t.ndim != order:
        raise ShapeError(f"expected an order-{order} tensor, got shape {t.shape}")
    if min(t.shape) < 1:
        raise ShapeError(f"every dimension must be >= 1, got {t.shape}")
    if not np.all(np.isfinite(t)):
        raise DomainError("tensor contains non-finite entries")
    return t


def _check_order3(t: np.ndarray) -> None:
    if t.ndim != 3:
        raise ShapeError(f"expected an order-3 tensor, got shape {t.shape}")


def _check_mode(n: int) -> int:
    if n not in (1, 2, 3):
        raise ShapeError(f"mode must be 1, 2 or 3, got {n!r}")
    return n - 1


def mode_n_unfold(t: np.ndarray, n: int) -> np.ndarray:
    _check_order3(t)
    axis = _check_mode(n)
    return np.reshape(np.moveaxis(t, axis, 0), (t.shape[axis], -1), order="F")


def mode_n_fold(m: np.ndarray, n: int, shape) -> np.ndarray:
    """Inverse of :func:`mode_n_unfold` for the same mode and target shape."""
    axis = _check_mode(n)
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3:
        raise ShapeError(f"target shape must have 3 entries, got {shape}")
    rest = int(np.prod(shape)) // shape[axis] if shape[axis] else 0
    if m.ndim != 2 or m.shape != (shape[axis], rest):
        raise ShapeError(f"matrix of shape {m.shape} cannot fold to {shape} along mode {n}")
    moved = (shape[axis],) + tuple(s for i, s in enumerate(shape) if i != axis)
    return np.moveaxis(np.reshape(m, moved, order="F"), 0, axis)


def mode_n_product(t: np.ndarray, m: np.ndarray, n: int) -> np.ndarray:
    """``t x_n m`` where ``m`` is ``p x d_n``; the result has mode-n size ``p``."""
    _check_order3(t)
    axis = _check_mode(n)
    if m.ndim != 2 or m.shape[1] != t.shape[axis]:
        raise ShapeError(
            f"matrix of shape {m.shape} does not match mode {n} of size {t.shape[axis]}"
        )
    shape = list(t.shape)
    shape[axis] = m.shape[0]
    return mode_n_fold(m @ mode_n_unfold(t, n), n, shape)


def frobenius_norm(t: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(t))))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b||_F / ||a||_F``; ``a`` is the reference."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    ref = frobenius_norm(a)
    if ref == 0.0:
        raise DomainError("reference tensor has zero norm")
    return frobenius_norm(a - b) / ref


def _fix_signs(u: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of every column made nonnegative; first index wins ties
    if u.size == 0:
        return u
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def svd_thin(m: np.ndarray):
    """Thin SVD ``m = left @ diag(s) @ right.T`` with ``k = min(p, q)``.

    Singular values are sorted descending with exact ties kept in their
    original order, and column signs are fixed so that each left singular
    vector's largest-magnitude entry is nonnegative (the matching right vector
    is flipped alongside). Results are deterministic for a fixed input.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError("matrix contains non-finite entries")
    left, s, right_t = np.linalg.svd(m, full_matrices=False)
    order = np.argsort(-s, kind="stable")
    left, s, right = left[:, order], s[order], right_t[order, :].T
    fixed = _fix_signs(left)
    flips = np.where(np.sum(fixed * left, axis=0) < 0, -1.0, 1.0)
    return fixed, s, right * flips


def leading_left_singular_vectors(m: np.ndarray, r: int) -> np.ndarray:
    """First ``r`` left singular vectors of ``m`` (``r`` may exceed ``min(p, q)``).

    When ``r`` is larger than the thin rank the basis is completed with an
    orthonormal complement from the full SVD.
    """
    p, q = m.shape
    if r < 1 or r > p:
        raise RankError(f"rank {r} outside [1, {p}]")
    if r <= min(p, q):
        return svd_thin(m)[0][:, :r]
    left, _, _ = np.linalg.svd(m, full_matrices=True)
    return _fix_signs(left[:, :r])


@dataclass(frozen=True)
class TuckerFactors:
    core: np.ndarray
    factor_u: np.ndarray
    factor_v: np.ndarray
    factor_z: np.ndarray

    @property
    def factors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.factor_u, self.factor_v, self.factor_z

    @property
    def ranks(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.core.shape)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(f.shape[0]) for f in self.factors)


@dataclass(frozen=True)
class CPFactors:
    weights: np.ndarray
    factor_a: np.ndarray
    factor_b: np.ndarray
    factor_c: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.weights.shape[0])

    @property
    def factors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.factor_a, self.factor_b, self.factor_c


def _check_ranks(shape, ranks) -> tuple[int, int, int]:
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != 3:
        raise RankError(f"need three ranks, got {ranks}")
    for r, d in zip(ranks, shape):
        if r < 1 or r > d:
            raise RankError(f"ranks {ranks} not within [1, d] for shape {tuple(shape)}")
    return ranks


def tucker_core(t: np.ndarray, u: np.ndarray, v: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Project ``t`` onto the factor subspaces: ``t x_1 u^T x_2 v^T x_3 z^T``."""
    core = mode_n_product(t, u.T, 1)
    core = mode_n_product(core, v.T, 2)
    return mode_n_product(core, z.T, 3)


def tucker_reconstruct(f: TuckerFactors) -> np.ndarray:
    core = f.core
    _check_order3(core)
    for n, factor in enumerate(f.factors, start=1):
        if factor.ndim != 2 or factor.shape[1] != core.shape[n - 1]:
            raise ShapeError(
                f"factor {n} of shape {factor.shape} does not match core {core.shape}"
            )
    w = mode_n_product(core, f.factor_u, 1)
    w = mode_n_product(w, f.factor_v, 2)
    return mode_n_product(w, f.factor_z, 3)


def hosvd(t: np.ndarray, ranks) -> TuckerFactors:
    """Truncated higher-order SVD."""
    _check_order3(t)
    ranks = _check_ranks(t.shape, ranks)
    u, v, z = (
        leading_left_singular_vectors(mode_n_unfold(t, n), r)
        for n, r in zip((1, 2, 3), ranks)
    )
    return TuckerFactors(tucker_core(t, u, v, z), u, v, z)


def _tucker_residual(t: np.ndarray, f: TuckerFactors) -> float:
    return frobenius_norm(t - tucker_reconstruct(f))


def hooi(t: np.ndarray, ranks, max_iters: int = 50, tol: float = 1e-10, return_trace: bool = False):
    """Higher-order orthogonal iteration, started from :func:`hosvd`.

    Each sweep re-solves every factor against the projection of ``t`` onto
    the other two. The trace holds the Frobenius residual of the HOSVD start
    followed by one entry per sweep; iteration stops after ``max_iters``
    sweeps or once a sweep improves the residual by less than ``tol``.
    """
    if max_iters < 0:
        raise ValueError("max_iters must be >= 0")
    current = hosvd(t, ranks)
    trace = [_tucker_residual(t, current)]
    for _ in range(max_iters):
        u, v, z = current.factors
        u = leading_left_singular_vectors(
            mode_n_unfold(mode_n_product(mode_n_product(t, v.T, 2), z.T, 3), 1), current.ranks[0]
        )
        v = leading_left_singular_vectors(
            mode_n_unfold(mode_n_product(mode_n_product(t, u.T, 1), z.T, 3), 2), current.ranks[1]
        )
        z = leading_left_singular_vectors(
            mode_n_unfold(mode_n_product(mode_n_product(t, u.T, 1), v.T, 2), 3), current.ranks[2]
        )
        candidate = TuckerFactors(tucker_core(t, u, v, z), u, v, z)
        err = _tucker_residual(t, candidate)
        current = candidate
        trace.append(err)
        if trace[-2] - err < tol:
            break
    return (current, trace) if return_trace else current


def cp_reconstruct(f: CPFactors) -> np.ndarray:
    a, b, c = f.factors
    r = f.rank
    if any(m.ndim != 2 or m.shape[1] != r for m in (a, b, c)):
        raise ShapeError("CP factors must all have one column per weight")
    return np.einsum("r,ir,jr,kr->ijk", f.weights, a, b, c)


def _khatri_rao(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # column-wise Kronecker with the first argument's index varying fastest,
    # matching the Kolda-Bader unfolding column order
    return np.einsum("ir,jr->jir", x, y).reshape(-1, x.shape[1])


def _ls_update(unfolded: np.ndarray, kr: np.ndarray, gram: np.ndarray) -> np.ndarray:
    rhs = unfolded @ kr
    try:
        if np.linalg.cond(gram) < 1e12:
            return np.linalg.solve(gram, rhs.T).T
    except np.linalg.LinAlgError:
        pass
    return np.linalg.solve(gram + CP_RIDGE * np.eye(gram.shape[0]), rhs.T).T


def _normalize_columns(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    return m / safe, norms


def cp_als(t: np.ndarray, rank: int, max_iters: int = 500, tol: float = 1e-12, seed: int = 0,
           return_trace: bool = False):
    """Rank-``rank`` CP decomposition by alternating least squares.

    Factors start uniform in [-1, 1] from ``seed``. Each sweep solves the
    three least-squares subproblems in turn; column norms are moved into the
    weights after every update. The trace records the residual
    ``||t - reconstruction||_F`` after each sweep, starting with the initial
    guess.
    """
    _check_order3(t)
    rank = int(rank)
    d1, d2, d3 = t.shape
    if rank < 1 or rank > min(d2 * d3, d1 * d3, d1 * d2):
        raise RankError(f"CP rank {rank} invalid for shape {t.shape}")

    rng = np.random.default_rng(seed)
    a, b, c = (rng.uniform(-1.0, 1.0, size=(d, rank)) for d in t.shape)
    weights = np.ones(rank)
    x1, x2, x3 = (mode_n_unfold(t, n) for n in (1, 2, 3))

    def residual():
        return frobenius_norm(t - cp_reconstruct(CPFactors(weights, a, b, c)))

    trace = [residual()]
    for _ in range(max_iters):
        # the factor being solved absorbs all magnitude; the other two are unit-column
        a, weights = _normalize_columns(_ls_update(x1, _khatri_rao(b, c), (b.T @ b) * (c.T @ c)))
        b, weights = _normalize_columns(_ls_update(x2, _khatri_rao(a, c), (a.T @ a) * (c.T @ c)))
        c, weights = _normalize_columns(_ls_update(x3, _khatri_rao(a, b), (a.T @ a) * (b.T @ b)))
        trace.append(residual())
        if abs(trace[-2] - trace[-1]) < tol:
            break

    # a column that collapsed to zero carries no magnitude; give it a unit direction
    for m in (a, b, c):
        dead = np.linalg.norm(m, axis=0) == 0
        m[:, dead] = 0.0
        m[0, dead] = 1.0
        weights = np.where(dead, 0.0, weights)
    out = CPFactors(weights, a, b, c)
    return (out, trace) if return_trace else out
