"""Small dense linear algebra in float64.

Both routines sit on LAPACK (through numpy/scipy); this module adds the
dimension checks, a canonical sign convention for QR and the error types
the rest of the package expects.
"""

import numpy as np
import scipy.linalg

from .errors import DecompositionError, DimensionError


def as_vec(x, n=None, name="vector"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {x.shape}")
    if n is not None and x.shape[0] != n:
        raise DimensionError(f"{name} must have length {n}, got {x.shape[0]}")
    return x


def as_mat(a, shape=None, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if shape is not None:
        rows, cols = shape
        if (rows is not None and a.shape[0] != rows) or (cols is not None and a.shape[1] != cols):
            raise DimensionError(f"{name} must have shape {shape}, got {a.shape}")
    return a


def qr_orthonormalize(a, rank_tol=1e-10):
    """Orthonormal basis ``Q`` (d1 x d) for the column span of ``a``.

    Columns are sign-normalized so that ``R`` has a positive diagonal, which
    makes ``Q`` a deterministic function of ``a``.
    """
    a = as_mat(a, name="A")
    rows, cols = a.shape
    if cols == 0 or rows == 0:
        raise DimensionError("qr_orthonormalize needs a non-empty matrix")
    if rows < cols:
        raise DimensionError(f"need rows >= cols, got {a.shape}")
    q, r = np.linalg.qr(a, mode="reduced")
    diag = np.diag(r)
    scale = max(np.abs(a).max(), np.finfo(float).tiny)
    if np.any(np.abs(diag) <= rank_tol * scale * max(rows, cols) ** 0.5):
        raise DecompositionError("input is numerically rank deficient")
    return q * np.where(diag < 0, -1.0, 1.0)


def solve_spd(a, b):
    """Solve ``a x = b`` for symmetric positive definite ``a`` via Cholesky."""
    a = as_mat(a, name="A")
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError(f"A must be square, got {a.shape}")
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != n:
        raise DimensionError(f"b has {b.shape[0]} rows, A has {n}")
    if not np.allclose(a, a.T, rtol=1e-12, atol=1e-12 * max(np.abs(a).max(), 1.0)):
        raise DecompositionError("A is not symmetric")
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"A is not positive definite: {exc}") from exc
    return scipy.linalg.cho_solve(factor, b)
