"""Dense float64 kernels with a fixed accumulation order.

Every kernel here is a pure function. Products accumulate over the inner
index in ascending order, exactly like a textbook triple loop, so results are
bit-reproducible across runs and machines that honour IEEE-754 doubles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import (
    NonFiniteError,
    NotOrthogonalError,
    NotPositiveDefiniteError,
    RankDeficientError,
    ShapeError,
)

RANK_TOL = 1e-12


def as_matrix(x, name="matrix") -> np.ndarray:
    """Coerce ``x`` to a C-contiguous 2-D float64 array with finite entries."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(a))[0])
        raise NonFiniteError(f"{name} has a non-finite entry at {bad}")
    return a


@numba.njit(cache=True)
def _matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n))
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                c[i, j] += aip * b[p, j]
    return c


def matmul(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` summed over the inner index in ascending order."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _matmul(a, b)


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64).T)


def frobenius(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


@dataclass(frozen=True)
class QrFactors:
    q: np.ndarray
    r: np.ndarray
    # ratio of largest to smallest |r_jj|; a cheap lower bound on cond(a)
    condition: float


@numba.njit(cache=True)
def _householder_qr(a):
    n = a.shape[0]
    r = a.copy()
    q = np.eye(n)
    v = np.zeros(n)
    for k in range(n - 1):
        norm2 = 0.0
        for i in range(k, n):
            norm2 += r[i, k] * r[i, k]
        norm = np.sqrt(norm2)
        if norm == 0.0:
            continue
        alpha = -norm if r[k, k] >= 0.0 else norm
        vnorm2 = 0.0
        for i in range(k, n):
            v[i] = r[i, k]
        v[k] -= alpha
        for i in range(k, n):
            vnorm2 += v[i] * v[i]
        if vnorm2 == 0.0:
            continue
        for j in range(k, n):
            s = 0.0
            for i in range(k, n):
                s += v[i] * r[i, j]
            f = 2.0 * s / vnorm2
            for i in range(k, n):
                r[i, j] -= f * v[i]
        for i in range(n):
            s = 0.0
            for p in range(k, n):
                s += q[i, p] * v[p]
            f = 2.0 * s / vnorm2
            for p in range(k, n):
                q[i, p] -= f * v[p]
        r[k, k] = alpha
        for i in range(k + 1, n):
            r[i, k] = 0.0
    for j in range(n):
        if r[j, j] < 0.0:
            for p in range(n):
                r[j, p] = -r[j, p] + 0.0
                q[p, j] = -q[p, j] + 0.0
    return q, r


def qr_decompose(a) -> QrFactors:
    """Householder QR of a square full-rank matrix.

    The diagonal of ``r`` is made strictly positive, which makes the
    factorization unique and therefore a smooth function of ``a``.
    """
    a = as_matrix(a, "qr input")
    n, m = a.shape
    if n != m:
        raise ShapeError(f"qr_decompose needs a square matrix, got {a.shape}")
    q, r = _householder_qr(a)
    diag = np.abs(np.diag(r))
    threshold = RANK_TOL * frobenius(a)
    small = np.flatnonzero(~(diag >= threshold))
    if small.size:
        j = int(small[0])
        raise RankDeficientError(j, float(diag[j]), threshold)
    return QrFactors(q=q, r=r, condition=float(diag.max() / diag.min()))


@numba.njit(cache=True)
def _cholesky(m):
    n = m.shape[0]
    low = np.zeros((n, n))
    for j in range(n):
        s = m[j, j]
        for p in range(j):
            s -= low[j, p] * low[j, p]
        if not s > 0.0:
            return low, j
        d = np.sqrt(s)
        low[j, j] = d
        for i in range(j + 1, n):
            t = m[i, j]
            for p in range(j):
                t -= low[i, p] * low[j, p]
            low[i, j] = t / d
    return low, -1


def cholesky(m, damp=0.0) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix."""
    m = as_matrix(m, "cholesky input")
    low, fail = _cholesky(m)
    if fail >= 0:
        raise NotPositiveDefiniteError(int(fail), damp)
    return low


@numba.njit(cache=True)
def _solve_lower(low, b):
    n, p = b.shape
    x = np.zeros((n, p))
    for c in range(p):
        for i in range(n):
            s = b[i, c]
            for k in range(i):
                s -= low[i, k] * x[k, c]
            x[i, c] = s / low[i, i]
    return x


@numba.njit(cache=True)
def _solve_upper(up, b):
    n, p = b.shape
    x = np.zeros((n, p))
    for c in range(p):
        for i in range(n - 1, -1, -1):
            s = b[i, c]
            for k in range(i + 1, n):
                s -= up[i, k] * x[k, c]
            x[i, c] = s / up[i, i]
    return x


def solve_lower(low, b) -> np.ndarray:
    """Solve ``low @ x = b`` for lower-triangular ``low``."""
    low, b = as_matrix(low, "triangular factor"), as_matrix(b, "right-hand side")
    if low.shape[0] != low.shape[1] or low.shape[0] != b.shape[0]:
        raise ShapeError(f"cannot solve {low.shape} system with rhs {b.shape}")
    return _solve_lower(low, b)


def solve_upper(up, b) -> np.ndarray:
    """Solve ``up @ x = b`` for upper-triangular ``up``."""
    up, b = as_matrix(up, "triangular factor"), as_matrix(b, "right-hand side")
    if up.shape[0] != up.shape[1] or up.shape[0] != b.shape[0]:
        raise ShapeError(f"cannot solve {up.shape} system with rhs {b.shape}")
    return _solve_upper(up, b)


def check_symmetric(h, name="matrix", tol=1e-10) -> np.ndarray:
    h = as_matrix(h, name)
    if h.shape[0] != h.shape[1]:
        raise ShapeError(f"{name} must be square, got {h.shape}")
    scale = max(float(np.abs(h).max()), 1.0)
    if np.abs(h - h.T).max() > tol * scale:
        raise ShapeError(f"{name} is not symmetric")
    return h


def dampen(h, damp) -> np.ndarray:
    """``h + damp * mean(diag h) * I``."""
    if damp < 0:
        raise ValueError(f"damp must be >= 0, got {damp}")
    h = np.array(h, dtype=np.float64)
    if damp:
        lam = damp * float(np.mean(np.diag(h)))
        h[np.diag_indices_from(h)] += lam
    return h


def cholesky_inverse(h, damp=0.0) -> np.ndarray:
    """Inverse of ``h + damp * mean(diag h) * I`` via its Cholesky factor."""
    h = check_symmetric(h, "hessian")
    low = cholesky(dampen(h, damp), damp)
    y = _solve_lower(low, np.eye(h.shape[0]))
    inv = _solve_upper(np.ascontiguousarray(low.T), y)
    return 0.5 * (inv + inv.T)


def orthogonality_error(q) -> float:
    """max |qᵀq − I|."""
    q = np.asarray(q, dtype=np.float64)
    return float(np.abs(matmul(q.T, q) - np.eye(q.shape[1])).max())


def check_orthogonal(q, tol=1e-8, name="rotation") -> np.ndarray:
    q = as_matrix(q, name)
    if q.shape[0] != q.shape[1]:
        raise ShapeError(f"{name} must be square, got {q.shape}")
    err = orthogonality_error(q)
    if err > tol:
        raise NotOrthogonalError(f"{name} is not orthogonal: max|QᵀQ − I| = {err:.3e} > {tol:.0e}")
    return q


def random_orthogonal(n, rng) -> np.ndarray:
    """Haar-distributed orthogonal matrix."""
    return qr_decompose(rng.standard_normal((n, n))).q


def block_diag(blocks) -> np.ndarray:
    sizes = [b.shape[0] for b in blocks]
    out = np.zeros((sum(sizes), sum(sizes)))
    o = 0
    for b, s in zip(blocks, sizes):
        out[o:o + s, o:o + s] = b
        o += s
    return out
