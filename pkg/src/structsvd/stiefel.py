"""Structured random orthonormal matrices and the projected-normal density.

Columns are generated one at a time: column ``i`` is a draw
``z_i ~ N(0, Omega_i)`` projected onto the orthogonal complement of the
previous columns and normalized.  With ``Omega_i = I`` this is the uniform
distribution on the Stiefel manifold.

Random numbers always come from an explicitly passed
:class:`numpy.random.Generator` (PCG64 by default via
``numpy.random.default_rng(seed)``), so results are bit-reproducible for a
fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import InputError, NumericalError
from .kernels import CoordinateSet, KernelSpec, jittered_cholesky

__all__ = [
    "BasisMatrix",
    "ProjectedColumn",
    "ORTHO_TOL",
    "orthonormality_error",
    "null_space_basis",
    "project_column",
    "generate_structured_orthonormal",
    "projected_normal_logdensity",
    "projected_normal_logdensity_chol",
]

ORTHO_TOL = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


def orthonormality_error(w: np.ndarray) -> float:
    """``max |W'W - I|``."""
    w = np.asarray(w, dtype=float)
    return float(np.abs(w.T @ w - np.eye(w.shape[1])).max()) if w.shape[1] else 0.0


@dataclass
class BasisMatrix:
    """An ``n x k`` matrix with orthonormal columns plus optional metadata."""

    columns: np.ndarray
    coords: CoordinateSet | None = None
    column_kernels: list[KernelSpec] | None = None

    def __post_init__(self):
        w = np.asarray(self.columns, dtype=float)
        if w.ndim != 2:
            raise InputError("basis matrix must be 2-D")
        n, k = w.shape
        if not 1 <= k <= n:
            raise InputError(f"need 1 <= k <= n, got n={n}, k={k}")
        err = orthonormality_error(w)
        if err >= ORTHO_TOL:
            raise InputError(f"columns are not orthonormal (max |W'W - I| = {err:.2e})")
        if self.coords is not None and len(self.coords) != n:
            raise InputError(f"{len(self.coords)} coordinates for {n} rows")
        if self.column_kernels is not None and len(self.column_kernels) != k:
            raise InputError(f"{len(self.column_kernels)} kernels for {k} columns")
        self.columns = w

    @property
    def shape(self) -> tuple[int, int]:
        return self.columns.shape

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.columns, dtype=dtype)


@dataclass
class ProjectedColumn:
    """Column ``i`` written as ``N @ w_tilde`` with ``N`` spanning the null space of the others."""

    w_tilde: np.ndarray
    null_basis: np.ndarray

    @property
    def column(self) -> np.ndarray:
        return self.null_basis @ self.w_tilde


def null_space_basis(w_partial: np.ndarray, n: int | None = None) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of ``span(w_partial)``.

    Takes the trailing ``n - j`` columns of a complete QR factorization of the
    ``n x j`` input.  An empty input (``j = 0``) yields the identity.
    """
    w_partial = np.asarray(w_partial, dtype=float)
    if w_partial.ndim == 1:
        w_partial = w_partial[:, None]
    if n is None:
        n = w_partial.shape[0]
    j = w_partial.shape[1] if w_partial.size else 0
    if j == 0:
        return np.eye(n)
    if w_partial.shape[0] != n or j > n:
        raise InputError(f"cannot take null space of a {w_partial.shape} matrix in R^{n}")
    q, r = linalg.qr(w_partial, mode="full", check_finite=False)
    diag = np.abs(np.diag(r))
    if diag.min() < 1e-8 * max(1.0, diag.max()):
        raise NumericalError(f"rank-deficient input to null_space_basis (min |R_ii| = {diag.min():.2e})")
    return q[:, j:]


def project_column(w: np.ndarray, i: int) -> ProjectedColumn:
    """Decompose column ``i`` of ``w`` into null-space basis and projected weights."""
    w = np.asarray(w, dtype=float)
    others = np.delete(w, i, axis=1)
    nb = null_space_basis(others, w.shape[0])
    return ProjectedColumn(nb.T @ w[:, i], nb)


def _cholesky_for_sampling(omega, i: int) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
        raise InputError(f"Omega_{i + 1} must be square, got shape {omega.shape}")
    if not np.allclose(omega, omega.T, rtol=0, atol=1e-10 * max(1.0, np.abs(omega).max())):
        raise InputError(f"Omega_{i + 1} is not symmetric")
    try:
        lower, _ = jittered_cholesky(omega, what=f"Omega_{i + 1}")
    except NumericalError as exc:
        raise InputError(f"Omega_{i + 1} is not positive definite: {exc}") from exc
    return lower


def generate_structured_orthonormal(
    n: int,
    k: int,
    omegas: Sequence[np.ndarray] | None,
    rng: np.random.Generator,
    coords: CoordinateSet | None = None,
    column_kernels: list[KernelSpec] | None = None,
) -> BasisMatrix:
    """Draw an ``n x k`` orthonormal matrix column by column.

    Parameters
    ----------
    n, k : int
        Matrix dimensions, ``1 <= k <= n``.
    omegas : sequence of ``(n, n)`` arrays, or None
        Covariance of the Gaussian draw behind each column.  ``None`` means
        ``I_n`` for every column (uniform on the Stiefel manifold).
    rng : numpy.random.Generator
        Source of randomness.
    """
    if not 1 <= k <= n:
        raise InputError(f"need 1 <= k <= n, got n={n}, k={k}")
    if omegas is not None and len(omegas) != k:
        raise InputError(f"expected {k} covariance matrices, got {len(omegas)}")
    factors = None
    if omegas is not None:
        factors = []
        for i, om in enumerate(omegas):
            if np.shape(om) != (n, n):
                raise InputError(f"Omega_{i + 1} has shape {np.shape(om)}, expected {(n, n)}")
            factors.append(_cholesky_for_sampling(om, i))
    w = np.empty((n, k))
    for i in range(k):
        z = rng.standard_normal(n)
        if factors is not None:
            z = factors[i] @ z
        prev = w[:, :i]
        x = z - prev @ (prev.T @ z)
        # second pass keeps W'W = I to ~1e-15 even when z is nearly in span(prev)
        x = x - prev @ (prev.T @ x)
        norm = np.linalg.norm(x)
        if not norm > 0:
            raise NumericalError(f"degenerate draw for column {i + 1}")
        w[:, i] = x / norm
    return BasisMatrix(w, coords, column_kernels)


def projected_normal_logdensity_chol(r: float, w_tilde: np.ndarray, chol_lower: np.ndarray) -> float:
    """As :func:`projected_normal_logdensity`, given the lower Cholesky factor of ``Omega*``."""
    nstar = w_tilde.shape[0]
    y = linalg.solve_triangular(chol_lower, w_tilde, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(chol_lower)))
    return float(
        -0.5 * nstar * _LOG_2PI - 0.5 * logdet - 0.5 * r * r * float(y @ y) + (nstar - 1) * math.log(r)
    )


def projected_normal_logdensity(r: float, w_tilde, omega_proj) -> float:
    """Joint log density of latent length ``r`` and direction ``w_tilde``.

    ``log N(r w_tilde; 0, Omega*) + (n* - 1) log r`` with ``n* = len(w_tilde)``,
    taken with respect to ``dr`` times surface measure on the unit sphere.
    """
    w_tilde = np.atleast_1d(np.asarray(w_tilde, dtype=float))
    omega_proj = np.atleast_2d(np.asarray(omega_proj, dtype=float))
    if not r > 0:
        raise InputError(f"latent length must be positive, got {r}")
    if omega_proj.shape != (w_tilde.shape[0],) * 2:
        raise InputError(f"dimension mismatch: w_tilde {w_tilde.shape} vs Omega* {omega_proj.shape}")
    if abs(np.linalg.norm(w_tilde) - 1.0) > 1e-8:
        raise InputError("w_tilde must have unit length")
    try:
        lower = linalg.cholesky(omega_proj, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalError("projected covariance is not positive definite") from exc
    return projected_normal_logdensity_chol(r, w_tilde, lower)
