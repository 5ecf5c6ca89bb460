"""Minimal dense linear algebra on float64 numpy arrays.

Matrices are plain 2-D C-order ``numpy.ndarray`` objects; this module adds
the shape- and domain-checked operations the rest of the package builds
on, plus a dependency-free truncated SVD.  The SVD is one-sided Jacobi:
plane rotations orthogonalize the columns of the input, the rotations
accumulate into the right singular vectors, and column norms become the
singular values.  Jacobi converges quadratically at the desk scales this
package targets and needs nothing beyond matrix-vector arithmetic, so the
same code runs against either kernel backend.
"""

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import NumericError, ParameterError, ShapeError

DEFAULT_SVD_TOL = 1e-12
DEFAULT_MAX_SWEEPS = 60


def make_rng(seed):
    """Deterministic generator; identical seeds give identical streams."""
    if not isinstance(seed, (int, np.integer)):
        raise ParameterError(f"seed must be an integer, got {type(seed).__name__}")
    return np.random.default_rng(int(seed))


def as_matrix(a, name="matrix"):
    """Validate and return ``a`` as a 2-D float64 array of finite entries."""
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{name} contains non-finite entries")
    return out


def ensure_finite(a, name="result"):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite entries")
    return a


def random_matrix(rng, rows, cols, scale):
    """Uniform entries in [-scale, scale]."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"rows and cols must be positive, got {rows}x{cols}")
    if not np.isfinite(scale) or scale < 0:
        raise ParameterError(f"scale must be finite and non-negative, got {scale}")
    return rng.uniform(-scale, scale, size=(rows, cols))


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a):
    return as_matrix(a, "a").T.copy()


def frobenius_norm(a):
    return float(np.linalg.norm(as_matrix(a, "a")))


@dataclass
class SvdResult:
    """Truncated factorization a ~= u @ diag(s) @ vt.

    u has orthonormal columns, vt orthonormal rows, s is non-negative and
    non-increasing.
    """

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def rank(self):
        return self.s.shape[0]

    def reconstruct(self):
        return (self.u * self.s) @ self.vt


def jacobi_svd(a, tol=DEFAULT_SVD_TOL, max_sweeps=DEFAULT_MAX_SWEEPS):
    """Full SVD of ``a`` by one-sided Jacobi rotations.

    Works on whichever orientation has the fewer columns; rank-deficient
    directions get their left singular vectors from an orthonormal
    completion so that u always has orthonormal columns.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    if m < n:
        flipped = jacobi_svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return SvdResult(u=flipped.vt.T.copy(), s=flipped.s, vt=flipped.u.T.copy())

    bt = np.ascontiguousarray(a.T)
    vt = np.eye(n)
    sweeps = backend.kernels().jacobi_sweeps(bt, vt, tol, max_sweeps)
    if sweeps < 0:
        raise NumericError(
            f"Jacobi SVD did not converge within {max_sweeps} sweeps "
            f"for a {m}x{n} matrix (tol={tol})"
        )

    s = np.sqrt(np.einsum("ij,ij->i", bt, bt))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    bt = bt[order]
    vt = vt[order]

    u = np.zeros((m, n))
    cutoff = max(m, n) * np.finfo(np.float64).eps * (s[0] if n else 0.0)
    deficient = []
    for i in range(n):
        if s[i] > cutoff:
            u[:, i] = bt[i] / s[i]
        else:
            deficient.append(i)
    for i in deficient:
        u[:, i] = _orthonormal_completion(u)
    return SvdResult(u=u, s=s, vt=vt)


def _orthonormal_completion(u):
    """A unit vector orthogonal to every nonzero column of u.

    Starts from the standard basis vector with the largest residual
    against span(u); with orthonormal columns that residual norm is
    1 - |u[j, :]|^2, so the pick costs O(mn) instead of forming the
    m x m projector.
    """
    row_sq = np.einsum("ij,ij->i", u, u)
    j = int(np.argmin(row_sq))
    v = -(u @ u[j])
    v[j] += 1.0
    v = v - u @ (u.T @ v)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise NumericError("orthonormal completion failed; matrix is degenerate")
    return v / norm


def truncated_svd(a, r, tol=DEFAULT_SVD_TOL, max_sweeps=DEFAULT_MAX_SWEEPS):
    """Best rank-r approximation factors of ``a``.

    The reported error of dropping ranks beyond r equals the l2 norm of
    the discarded singular values.
    """
    a = as_matrix(a, "a")
    limit = min(a.shape)
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= limit:
        raise ParameterError(
            f"rank must be an integer in [1, {limit}] for shape {a.shape}, got {r!r}"
        )
    full = jacobi_svd(a, tol=tol, max_sweeps=max_sweeps)
    return SvdResult(
        u=np.ascontiguousarray(full.u[:, :r]),
        s=full.s[:r].copy(),
        vt=np.ascontiguousarray(full.vt[:r]),
    )
