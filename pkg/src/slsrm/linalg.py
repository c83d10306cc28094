"""Dense linear-algebra kernels used by every factor model.

All routines work in float64 and are pure functions of their inputs.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import DegenerateVector, InvalidInput, SingularMatrix

PINV_RTOL = 1e-12
SPD_RTOL = 1e-12
SYMMETRY_TOL = 1e-10


class SvdResult(NamedTuple):
    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray


def _as_finite_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInput(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise InvalidInput("matrix contains NaN or infinite entries")
    return a


def compact_svd(a) -> SvdResult:
    """Compact singular value decomposition ``a = u @ diag(s) @ vt``.

    Parameters
    ----------
    a : array_like, shape (m, n)
        Finite input matrix.

    Returns
    -------
    SvdResult
        ``u`` is (m, r), ``singular_values`` has length r and ``vt`` is
        (r, n) with r = min(m, n). Singular values are non-increasing.
        Signs are fixed so that the largest-magnitude entry of every
        column of ``u`` is positive, which makes the factors reproducible.
    """
    a = _as_finite_matrix(a)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    vt = vt * signs[:, None]
    return SvdResult(u, s, vt)


def pseudo_inverse(a) -> np.ndarray:
    """Moore-Penrose pseudo-inverse.

    Singular values below ``1e-12 * s_max`` are treated as zero.
    """
    a = _as_finite_matrix(a)
    u, s, vt = compact_svd(a)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((a.shape[1], a.shape[0]))
    # the second test keeps 1/s finite for subnormal inputs
    keep = (s > PINV_RTOL * s[0]) & (s > 1.0 / np.finfo(np.float64).max)
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (vt.T * inv_s) @ u.T


def sym_inv_sqrt(a) -> np.ndarray:
    """Inverse square root of a symmetric positive definite matrix.

    Raises
    ------
    SingularMatrix
        If ``a`` is not symmetric or its smallest eigenvalue is at most
        ``1e-12`` times the largest.
    """
    a = _as_finite_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise InvalidInput(f"expected a square matrix, got shape {a.shape}")
    scale = max(np.abs(a).max(), np.finfo(float).tiny)
    if np.abs(a - a.T).max() > SYMMETRY_TOL * scale:
        raise SingularMatrix("matrix is not symmetric")
    evals, evecs = np.linalg.eigh((a + a.T) / 2.0)
    if evals[-1] <= 0 or evals[0] <= SPD_RTOL * evals[-1]:
        raise SingularMatrix(
            f"matrix is not positive definite (eigenvalues in [{evals[0]:.3g}, {evals[-1]:.3g}])"
        )
    b = (evecs / np.sqrt(evals)) @ evecs.T
    return (b + b.T) / 2.0


def pearson(x, y) -> float:
    """Sample Pearson correlation between two equal-length vectors."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise InvalidInput(f"need two vectors of equal length >= 2, got {x.size} and {y.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    nx = np.sqrt(xc @ xc)
    ny = np.sqrt(yc @ yc)
    if nx == 0.0 or ny == 0.0:
        raise DegenerateVector("pearson correlation is undefined for a zero-variance vector")
    r = (xc @ yc) / (nx * ny)
    return float(min(1.0, max(-1.0, r)))


def constant_rows(a, rtol: float = 1e-12) -> np.ndarray:
    """Boolean mask of rows whose population std is negligible."""
    a = np.asarray(a, dtype=np.float64)
    std = a.std(axis=1)
    scale = np.abs(a).max(axis=1)
    return std <= rtol * scale


def zscore_rows(a, return_constant: bool = False):
    """Standardize every row to zero mean and unit population std.

    Constant rows (dead voxels) become all-zero rows instead of raising.
    With ``return_constant=True`` the boolean mask of those rows is
    returned alongside the result.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] < 2:
        raise InvalidInput(f"need a 2-D matrix with at least 2 columns, got shape {a.shape}")
    const = constant_rows(a)
    centered = a - a.mean(axis=1, keepdims=True)
    std = centered.std(axis=1, keepdims=True)
    std[const] = 1.0
    out = centered / std
    out[const] = 0.0
    if return_constant:
        return out, const
    return out
