"""Dense LU factorisation with partial pivoting, determinants and inverses.

Only small square matrices show up here (the channel-mixing weights of the
1x1 convolutions, at most a few dozen rows), so the routines favour clarity
over blocking.  Everything is computed in float64 regardless of input dtype.
"""

import numpy as np

from .errors import ShapeError, SingularMatrixError

SINGULAR_TOL = 1e-12


def _as_square(M):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] < 1:
        raise ShapeError(f"expected a non-empty square matrix, got shape {M.shape}")
    return M


def _factor(M):
    """Doolittle elimination in place. Returns (perm, LU, sign)."""
    A = _as_square(M).copy()
    n = A.shape[0]
    perm = np.arange(n)
    sign = 1.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(A[k:, k])))
        if abs(A[p, k]) < SINGULAR_TOL:
            raise SingularMatrixError(
                f"pivot {k} has magnitude {abs(A[p, k]):.3e} < {SINGULAR_TOL:g}")
        if p != k:
            A[[k, p]] = A[[p, k]]
            perm[[k, p]] = perm[[p, k]]
            sign = -sign
        A[k + 1:, k] /= A[k, k]
        A[k + 1:, k + 1:] -= np.outer(A[k + 1:, k], A[k, k + 1:])
    return perm, A, sign


def lu_decompose(M):
    """Return ``(P, L, U)`` with ``P @ M == L @ U``.

    ``L`` is unit lower triangular and ``U`` upper triangular.  Raises
    :class:`SingularMatrixError` when a pivot falls below ``1e-12``.
    """
    perm, A, _ = _factor(M)
    n = A.shape[0]
    P = np.eye(n)[perm]
    L = np.tril(A, -1) + np.eye(n)
    U = np.triu(A)
    return P, L, U


def log_abs_det(M):
    _, A, _ = _factor(M)
    return float(np.sum(np.log(np.abs(np.diag(A)))))


def slogdet(M):
    """(sign, log|det|) of ``M``."""
    _, A, sign = _factor(M)
    d = np.diag(A)
    return sign * float(np.prod(np.sign(d))), float(np.sum(np.log(np.abs(d))))


def lu_solve(perm, A, B):
    B = np.asarray(B, dtype=np.float64)[perm]
    n = A.shape[0]
    X = B.copy()
    for i in range(n):
        X[i] -= A[i, :i] @ X[:i]
    for i in range(n - 1, -1, -1):
        X[i] = (X[i] - A[i, i + 1:] @ X[i + 1:]) / A[i, i]
    return X


def invert(M):
    perm, A, _ = _factor(M)
    return lu_solve(perm, A, np.eye(A.shape[0]))
