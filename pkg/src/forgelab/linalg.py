"""Dense real linear algebra used by the forging constructions.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Every function
here is pure: inputs are never modified.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LinAlgFailure(RuntimeError):
    """Raised when a decomposition fails to converge."""


@dataclass(frozen=True)
class Tolerance:
    rank_rel_tol: float = 1e-10
    residual_abs_tol: float = 1e-8

    def __post_init__(self):
        if not (0 < self.rank_rel_tol < 1):
            raise ValueError("rank_rel_tol must lie in (0, 1)")
        if self.residual_abs_tol <= 0:
            raise ValueError("residual_abs_tol must be positive")


DEFAULT_TOL = Tolerance()


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(-1, 1)
    elif m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf")
    return m


def kron(a, b):
    """Kronecker product; block ``(i, j)`` of the result is ``a[i, j] * b``."""
    sa, sb = _shape2(a), _shape2(b)
    rows, cols = sa[0] * sb[0], sa[1] * sb[1]
    if rows * cols > np.iinfo(np.intp).max // 8:
        raise OverflowError(f"kron result of shape ({rows}, {cols}) is too large")
    return np.kron(as_matrix(a, "a"), as_matrix(b, "b"))


def _shape2(a):
    s = np.shape(a)
    return (1, 1) if len(s) == 0 else (s[0], 1) if len(s) == 1 else s


def vec(a):
    """Stack the columns of ``a`` into one vector."""
    return np.asarray(a, dtype=np.float64).reshape(-1, order="F")


def unvec(v, shape):
    """Inverse of :func:`vec` for a known ``shape``."""
    return np.asarray(v, dtype=np.float64).reshape(shape, order="F")


def svd(a):
    """Thin SVD ``a = U @ diag(S) @ Vt`` with ``S`` non-increasing."""
    a = as_matrix(a)
    try:
        return np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise LinAlgFailure(f"SVD did not converge for shape {a.shape}") from exc


def _cutoff(s, tol):
    if s.size == 0 or s[0] == 0.0:
        return np.inf
    return tol.rank_rel_tol * s[0]


def rank(a, tol=DEFAULT_TOL):
    s = svd(a)[1]
    return int(np.count_nonzero(s > _cutoff(s, tol)))


def pinv(a, tol=DEFAULT_TOL):
    """Moore-Penrose pseudo-inverse with a relative singular-value cutoff."""
    a = as_matrix(a)
    u, s, vt = svd(a)
    keep = s > _cutoff(s, tol)
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (vt.T * inv) @ u.T


def nullspace(a, tol=DEFAULT_TOL):
    """Orthonormal basis (as columns) of the null space of ``a``.

    Taken from the trailing right singular vectors of a full SVD. A trivial
    null space gives a ``(cols, 0)`` matrix.
    """
    a = as_matrix(a)
    n_cols = a.shape[1]
    if a.shape[0] == 0:
        return np.eye(n_cols)
    try:
        _, s, vt = np.linalg.svd(a, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise LinAlgFailure(f"SVD did not converge for shape {a.shape}") from exc
    r = int(np.count_nonzero(s > _cutoff(s, tol)))
    return vt[r:].T.copy()


def left_nullspace(a, tol=DEFAULT_TOL):
    """Basis of ``{u : u.T @ a = 0}``, i.e. ``nullspace(a.T)``."""
    return nullspace(as_matrix(a).T, tol)


def solve_ls(a, rhs, tol=DEFAULT_TOL):
    """Minimum-norm least-squares solution of ``a @ x = rhs``.

    Returns ``(x, consistent)`` where ``consistent`` tells whether the residual
    is within ``tol.residual_abs_tol`` relative to ``max(1, ||rhs||)``.
    """
    a = as_matrix(a, "a")
    rhs = np.asarray(rhs, dtype=np.float64)
    vector_rhs = rhs.ndim == 1
    rhs = as_matrix(rhs, "rhs")
    if a.shape[0] != rhs.shape[0]:
        raise ValueError(f"row mismatch: a has {a.shape[0]}, rhs has {rhs.shape[0]}")
    x = pinv(a, tol) @ rhs
    residual = np.linalg.norm(a @ x - rhs)
    consistent = bool(residual <= tol.residual_abs_tol * max(1.0, np.linalg.norm(rhs)))
    if vector_rhs:
        x = x.ravel()
    return x, consistent

