"""Correlation kernels and positive-definite correlation matrices.

The Matérn kernel uses the conventional parameterization

    C(h) = 2^(1-nu) / Gamma(nu) * (sqrt(2 nu) h / rho)^nu * K_nu(sqrt(2 nu) h / rho)

with ``K_nu`` the modified Bessel function of the second kind.  Under this
form ``nu = 0.5`` is exactly the exponential kernel ``exp(-h / rho)`` and the
``nu -> inf`` limit is ``exp(-h^2 / (2 rho^2))``.

The Gaussian family is evaluated as ``exp(-h^2 / rho)``, i.e. ``rho`` plays
the role of ``2 * l^2`` for a squared-exponential length-scale ``l``.  Use
:func:`gaussian_length_scale_for` to convert between the two.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg, special

from .errors import InputError, NumericalError

__all__ = [
    "KernelFamily",
    "KernelSpec",
    "CoordinateSet",
    "kernel_value",
    "kernel_from_distance",
    "correlation_matrix",
    "distance_matrix",
    "jittered_cholesky",
    "gaussian_length_scale_for",
]

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-6


class KernelFamily(str, enum.Enum):
    MATERN = "matern"
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"
    IDENTITY = "identity"


@dataclass(frozen=True)
class KernelSpec:
    """A correlation kernel family plus its hyperparameters.

    ``nu`` is only meaningful for Matérn; ``length_scale`` is ignored (and
    must be ``None``) for the identity family.
    """

    family: KernelFamily
    length_scale: float | None = None
    nu: float | None = None

    def __post_init__(self):
        family = KernelFamily(self.family)
        object.__setattr__(self, "family", family)
        if family is KernelFamily.IDENTITY:
            if self.length_scale is not None or self.nu is not None:
                raise InputError("identity kernel carries no hyperparameters")
            return
        if self.length_scale is None or not self.length_scale > 0:
            raise InputError(f"length_scale must be positive, got {self.length_scale!r}")
        if family is KernelFamily.MATERN:
            if self.nu is None or not self.nu > 0:
                raise InputError(f"Matern smoothness nu must be positive, got {self.nu!r}")
        elif self.nu is not None:
            raise InputError(f"nu only applies to the Matern family, not {family.value}")

    @classmethod
    def matern(cls, length_scale: float, nu: float = 3.5) -> "KernelSpec":
        return cls(KernelFamily.MATERN, float(length_scale), float(nu))

    @classmethod
    def gaussian(cls, length_scale: float) -> "KernelSpec":
        return cls(KernelFamily.GAUSSIAN, float(length_scale))

    @classmethod
    def exponential(cls, length_scale: float) -> "KernelSpec":
        return cls(KernelFamily.EXPONENTIAL, float(length_scale))

    @classmethod
    def identity(cls) -> "KernelSpec":
        return cls(KernelFamily.IDENTITY)

    @property
    def is_identity(self) -> bool:
        return self.family is KernelFamily.IDENTITY

    def with_length_scale(self, length_scale: float) -> "KernelSpec":
        if self.is_identity:
            return self
        return KernelSpec(self.family, float(length_scale), self.nu)

    def to_dict(self) -> dict:
        out = {"family": self.family.value}
        if self.length_scale is not None:
            out["length_scale"] = self.length_scale
        if self.nu is not None:
            out["nu"] = self.nu
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "KernelSpec":
        unknown = set(data) - {"family", "length_scale", "nu"}
        if unknown:
            raise InputError(f"unknown kernel keys {sorted(unknown)}; valid: family, length_scale, nu")
        return cls(
            KernelFamily(data["family"]),
            None if data.get("length_scale") is None else float(data["length_scale"]),
            None if data.get("nu") is None else float(data["nu"]),
        )


class CoordinateSet:
    """Ordered set of ``n`` points in ``R^d``, stored as an ``(n, d)`` array."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise InputError(f"coordinates must be a non-empty (n, d) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InputError("coordinates must be finite")
        self.points = pts
        self.points.setflags(write=False)

    @classmethod
    def grid(cls, lo: float, hi: float, n: int) -> "CoordinateSet":
        """``n`` equally spaced points on ``[lo, hi]``, endpoints included."""
        return cls(np.linspace(lo, hi, n))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def diameter(self) -> float:
        """Largest pairwise Euclidean distance."""
        if len(self) == 1:
            return 0.0
        return float(distance_matrix(self).max())

    def __eq__(self, other) -> bool:
        return isinstance(other, CoordinateSet) and np.array_equal(self.points, other.points)

    def __repr__(self) -> str:
        return f"CoordinateSet(n={len(self)}, dim={self.dim})"


def _as_coords(coords) -> CoordinateSet:
    return coords if isinstance(coords, CoordinateSet) else CoordinateSet(coords)


def distance_matrix(coords) -> np.ndarray:
    pts = _as_coords(coords).points
    diff = pts[:, None, :] - pts[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _matern_half_integer(h: np.ndarray, p: int, rho: float) -> np.ndarray:
    # nu = p + 1/2:  exp(-x) * p!/(2p)! * sum_i (p+i)!/(i!(p-i)!) (2x)^(p-i),  x = sqrt(2 nu) h / rho
    x = math.sqrt(2 * p + 1) * h / rho
    poly = np.zeros_like(x)
    for i in range(p + 1):
        coef = math.factorial(p + i) / (math.factorial(i) * math.factorial(p - i))
        poly = poly + coef * (2.0 * x) ** (p - i)
    return math.factorial(p) / math.factorial(2 * p) * np.exp(-x) * poly


def _matern_general(h: np.ndarray, nu: float, rho: float) -> np.ndarray:
    x = math.sqrt(2 * nu) * h / rho
    out = np.ones_like(x)
    pos = x > 0
    xp = x[pos]
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        logc = (1 - nu) * math.log(2) - special.gammaln(nu) + nu * np.log(xp) + np.log(special.kve(nu, xp)) - xp
        vals = np.exp(logc)
    # kve overflows only for x -> 0 where the correlation tends to one
    vals[~np.isfinite(vals)] = 1.0
    out[pos] = np.minimum(vals, 1.0)
    return out


def kernel_from_distance(spec: KernelSpec, h) -> np.ndarray:
    """Evaluate the correlation at (an array of) distances ``h >= 0``."""
    h = np.asarray(h, dtype=float)
    fam = spec.family
    if fam is KernelFamily.IDENTITY:
        return (h == 0).astype(float)
    rho = spec.length_scale
    if fam is KernelFamily.EXPONENTIAL:
        return np.exp(-h / rho)
    if fam is KernelFamily.GAUSSIAN:
        return np.exp(-(h * h) / rho)
    nu = spec.nu
    two_nu = 2.0 * nu
    if abs(two_nu - round(two_nu)) < 1e-12 and int(round(two_nu)) % 2 == 1:
        return _matern_half_integer(h, (int(round(two_nu)) - 1) // 2, rho)
    return _matern_general(h, nu, rho)


def kernel_value(spec: KernelSpec, s, t) -> float:
    """Correlation ``C(s, t)`` between two points of equal dimension."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if s.shape != t.shape or s.ndim != 1:
        raise InputError(f"coordinate dimension mismatch: {s.shape} vs {t.shape}")
    h = float(np.sqrt(np.sum((s - t) ** 2)))
    return float(kernel_from_distance(spec, np.array([h]))[0])


def correlation_matrix(spec: KernelSpec, coords) -> np.ndarray:
    """Dense ``n x n`` correlation matrix with unit diagonal.

    The matrix is returned without jitter; pass it through
    :func:`jittered_cholesky` before factorizing.
    """
    coords = _as_coords(coords)
    if spec.is_identity:
        return np.eye(len(coords))
    c = kernel_from_distance(spec, distance_matrix(coords))
    np.fill_diagonal(c, 1.0)
    return c


def jittered_cholesky(a: np.ndarray, what: str = "matrix") -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``a + eps I`` with the smallest workable ``eps``.

    Tries ``eps = 0`` first, then ``1e-10`` doubling up to ``1e-6``.  Returns
    ``(L, eps)``; raises :class:`NumericalError` if every attempt fails.
    """
    n = a.shape[0]
    eps = 0.0
    while True:
        try:
            lower = linalg.cholesky(a + eps * np.eye(n) if eps else a, lower=True, check_finite=False)
            if eps:
                log.debug("cholesky of %s needed jitter %.3g", what, eps)
            return lower, eps
        except linalg.LinAlgError:
            pass
        eps = JITTER_START if eps == 0.0 else 2.0 * eps
        if eps > JITTER_MAX:
            break
    try:
        min_eig = float(np.linalg.eigvalsh(0.5 * (a + a.T))[0])
    except np.linalg.LinAlgError:
        min_eig = float("nan")
    raise NumericalError(
        f"Cholesky of {what} ({n}x{n}) failed with jitter up to {JITTER_MAX:g}; "
        f"smallest eigenvalue {min_eig:.3e}"
    )


def gaussian_length_scale_for(matern_rho: float) -> float:
    """Gaussian-family ``length_scale`` matching the Matérn ``nu -> inf`` limit."""
    return 2.0 * matern_rho**2
