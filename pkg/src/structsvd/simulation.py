"""Synthetic data with known ground truth.

``Z = M + U D V' + sigma * eta`` where ``U`` and ``V`` come from the
structured orthonormal generator with Matérn column covariances, and
``sigma`` is set from realized sample variances so that
``var(M + Y) / var(sigma * eta)`` equals the requested SNR exactly.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

from .errors import InputError
from .kernels import CoordinateSet, KernelSpec, correlation_matrix, jittered_cholesky
from .stiefel import generate_structured_orthonormal

__all__ = [
    "CovariateMode",
    "SyntheticSpec",
    "SyntheticTruth",
    "simulate",
    "make_covariates",
    "BETA_DEFAULT",
    "rank_study_spec",
    "variable_length_spec",
    "covariate_study_spec",
]

log = logging.getLogger(__name__)

BETA_DEFAULT = (-2.0, 0.6, 1.2, -0.9)


class CovariateMode(str, enum.Enum):
    NONE = "none"
    M1 = "M1"
    M2 = "M2"
    M3 = "M3"


@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    m: int
    d_true: tuple[float, ...]
    u_kernels: tuple[KernelSpec, ...]
    v_kernels: tuple[KernelSpec, ...]
    snr: float
    domain_u: tuple[float, float] = (-5.0, 5.0)
    domain_v: tuple[float, float] = (0.0, 10.0)
    covariate_mode: CovariateMode = CovariateMode.NONE
    beta_true: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "d_true", tuple(float(x) for x in self.d_true))
        object.__setattr__(self, "u_kernels", tuple(self.u_kernels))
        object.__setattr__(self, "v_kernels", tuple(self.v_kernels))
        object.__setattr__(self, "covariate_mode", CovariateMode(self.covariate_mode))
        k = len(self.d_true)
        if k < 1 or k > min(self.n, self.m):
            raise InputError(f"need 1 <= k_true <= min(n, m), got k_true={k}")
        if len(self.u_kernels) != k or len(self.v_kernels) != k:
            raise InputError("need one kernel per true basis column on each side")
        if not all(x > 0 for x in self.d_true):
            raise InputError("d_true must be positive")
        if not self.snr > 0:
            raise InputError("snr must be positive")
        if any(b >= a for a, b in zip(self.d_true, self.d_true[1:])):
            log.warning("d_true is not strictly decreasing: %s", self.d_true)
        if self.covariate_mode is not CovariateMode.NONE:
            beta = BETA_DEFAULT if self.beta_true is None else self.beta_true
            if len(beta) != 4:
                raise InputError("covariate designs have 4 columns; beta_true needs 4 entries")
            object.__setattr__(self, "beta_true", tuple(float(b) for b in beta))

    @property
    def k_true(self) -> int:
        return len(self.d_true)

    def coords_u(self) -> CoordinateSet:
        return CoordinateSet.grid(*self.domain_u, self.n)

    def coords_v(self) -> CoordinateSet:
        return CoordinateSet.grid(*self.domain_v, self.m)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "m": self.m,
            "d_true": list(self.d_true),
            "u_kernels": [kk.to_dict() for kk in self.u_kernels],
            "v_kernels": [kk.to_dict() for kk in self.v_kernels],
            "snr": self.snr,
            "domain_u": list(self.domain_u),
            "domain_v": list(self.domain_v),
            "covariate_mode": self.covariate_mode.value,
            "beta_true": None if self.beta_true is None else list(self.beta_true),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SyntheticSpec":
        valid = {f.name for f in fields(cls)}
        unknown = set(data) - valid
        if unknown:
            raise InputError(f"unknown simulation keys {sorted(unknown)}; valid keys: {sorted(valid)}")
        missing = {"n", "m", "d_true", "u_kernels", "v_kernels", "snr"} - set(data)
        if missing:
            raise InputError(f"simulation config is missing required keys {sorted(missing)}")
        kw = dict(data)
        k = len(kw["d_true"])
        for side in ("u_kernels", "v_kernels"):
            val = kw[side]
            if isinstance(val, dict):
                val = [val] * k
            kw[side] = tuple(KernelSpec.from_dict(x) if isinstance(x, dict) else x for x in val)
        for dom in ("domain_u", "domain_v"):
            if dom in kw:
                kw[dom] = tuple(float(x) for x in kw[dom])
        if kw.get("beta_true") is not None:
            kw["beta_true"] = tuple(kw["beta_true"])
        return cls(**kw)


@dataclass
class SyntheticTruth:
    Z: np.ndarray
    U: np.ndarray
    V: np.ndarray
    d: np.ndarray
    M: np.ndarray
    sigma: float
    eta: np.ndarray
    beta: np.ndarray | None = None
    X: np.ndarray | None = None
    coords_u: CoordinateSet | None = None
    coords_v: CoordinateSet | None = None

    @property
    def Y(self) -> np.ndarray:
        return (self.U * self.d) @ self.V.T

    @property
    def k(self) -> int:
        return self.d.shape[0]


def _sample_variance(a: np.ndarray) -> float:
    return float(np.var(a, ddof=1))


def simulate(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> SyntheticTruth:
    """Draw one synthetic dataset; ``rng`` defaults to ``default_rng(spec.seed)``."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    cu, cv = spec.coords_u(), spec.coords_v()
    k = spec.k_true
    u = generate_structured_orthonormal(
        spec.n, k, [correlation_matrix(kk, cu) for kk in spec.u_kernels], rng, cu, list(spec.u_kernels)
    ).columns
    v = generate_structured_orthonormal(
        spec.m, k, [correlation_matrix(kk, cv) for kk in spec.v_kernels], rng, cv, list(spec.v_kernels)
    ).columns
    d = np.asarray(spec.d_true)
    y = (u * d) @ v.T
    x = beta = None
    mean = np.zeros((spec.n, spec.m))
    if spec.covariate_mode is not CovariateMode.NONE:
        x = make_covariates(spec.covariate_mode, spec.n, spec.m, rng, cu, cv)
        beta = np.asarray(spec.beta_true)
        mean = (x @ beta).reshape((spec.n, spec.m), order="F")
    eta = rng.standard_normal((spec.n, spec.m))
    sigma = float(np.sqrt(_sample_variance(mean + y) / (spec.snr * _sample_variance(eta))))
    z = mean + y + sigma * eta
    return SyntheticTruth(z, u, v, d, mean, sigma, eta, beta, x, cu, cv)


def _gaussian_draw(cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lower, _ = jittered_cholesky(cov, what="covariate covariance")
    return lower @ rng.standard_normal(cov.shape[0])


def make_covariates(
    mode: CovariateMode | str,
    n: int,
    m: int,
    rng: np.random.Generator,
    coords_u: CoordinateSet | None = None,
    coords_v: CoordinateSet | None = None,
) -> np.ndarray:
    """``nm x 4`` design matrix, rows ordered as ``vec`` (space index fastest).

    ``M1``: iid ``N(0, 0.2^2)``.  ``M2``/``M3``: two spatial fields replicated
    over time, one temporal field replicated over space, and one
    space-time field, all Matérn(3.5) with length-scales ``(3, 3, 1)`` for
    ``M2`` and ``(0.3, 0.3, 1)`` for ``M3``.  The space-time field uses an
    isotropic kernel on the ``(x, t)`` product grid.
    """
    mode = CovariateMode(mode)
    if mode is CovariateMode.NONE:
        raise InputError("covariate mode 'none' has no design matrix")
    if mode is CovariateMode.M1:
        return 0.2 * rng.standard_normal((n * m, 4))
    coords_u = CoordinateSet.grid(-5.0, 5.0, n) if coords_u is None else coords_u
    coords_v = CoordinateSet.grid(0.0, 10.0, m) if coords_v is None else coords_v
    rho_s, rho_t, rho_st = (3.0, 3.0, 1.0) if mode is CovariateMode.M2 else (0.3, 0.3, 1.0)
    cs = correlation_matrix(KernelSpec.matern(rho_s, 3.5), coords_u)
    ct = correlation_matrix(KernelSpec.matern(rho_t, 3.5), coords_v)
    x1 = _gaussian_draw(cs, rng)
    x2 = _gaussian_draw(cs, rng)
    xt = _gaussian_draw(ct, rng)
    grid = np.column_stack([np.tile(coords_u.points[:, 0], m), np.repeat(coords_v.points[:, 0], n)])
    cst = correlation_matrix(KernelSpec.matern(rho_st, 3.5), CoordinateSet(grid))
    xst = _gaussian_draw(cst, rng)
    return np.column_stack([np.tile(x1, m), np.tile(x2, m), np.repeat(xt, n), xst])


def rank_study_spec(n: int = 100, m: int = 100, snr: float = 2.0, seed: int = 0,
                    d_true=(40.0, 30.0, 20.0, 10.0, 5.0), rho: float = 3.0) -> SyntheticSpec:
    kern = KernelSpec.matern(rho, 3.5)
    k = len(d_true)
    return SyntheticSpec(n, m, tuple(d_true), (kern,) * k, (kern,) * k, snr, seed=seed)


def variable_length_spec(n: int = 100, m: int = 100, snr: float = 2.0, seed: int = 0,
                         rhos=(3.5, 1.0, 0.5, 0.25), d_true=(40.0, 30.0, 20.0, 10.0)) -> SyntheticSpec:
    kerns = tuple(KernelSpec.matern(r, 3.5) for r in rhos)
    return SyntheticSpec(n, m, tuple(d_true), kerns, kerns, snr, seed=seed)


def covariate_study_spec(mode, n: int = 100, m: int = 100, snr: float = 2.0, seed: int = 0,
                         d_true=(40.0, 30.0, 20.0, 10.0, 5.0), rho: float = 3.0,
                         beta=BETA_DEFAULT) -> SyntheticSpec:
    kern = KernelSpec.matern(rho, 3.5)
    k = len(d_true)
    return SyntheticSpec(n, m, tuple(d_true), (kern,) * k, (kern,) * k, snr,
                         covariate_mode=CovariateMode(mode), beta_true=tuple(beta), seed=seed)
