"""Model configuration, parameter state and the likelihood/prior algebra.

Data model::

    Z = M + U D V' + sigma * eta,     eta iid N(0, 1)

with ``U`` (n x k) and ``V`` (m x k) orthonormal, ``D = diag(d)``, ``d > 0``,
and ``vec(M) = X beta`` when covariates are supplied.  Column ``i`` of ``U``
is written ``N_i u_tilde_i`` where ``N_i`` spans the null space of the other
columns, and ``d_i u_tilde_i`` has the latent-length projected-normal prior
``N(0, N_i' Omega_i N_i) d_i^(n-k)`` with ``Omega_i = sigma2_u[i] C(rho_u[i])``.
The same holds for ``V`` with ``m`` in place of ``n``.

Column indices are 0-based throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Any

import numpy as np

from .errors import InputError
from .kernels import KernelFamily, KernelSpec
from .stiefel import ORTHO_TOL, orthonormality_error, projected_normal_logdensity

__all__ = [
    "SvdModelConfig",
    "SvdModelState",
    "ResidualView",
    "log_likelihood",
    "residual_for_column",
    "log_prior_column",
    "mean_matrix",
    "FIXABLE_PARAMS",
]

FIXABLE_PARAMS = frozenset({"d", "U", "V", "sigma2", "sigma2_u", "sigma2_v", "rho_u", "rho_v", "beta"})
COLUMN_UPDATES = ("normalize", "exact")
RHO_UPDATES = ("joint", "conditional")


@dataclass(frozen=True)
class SvdModelConfig:
    """Everything needed to run one chain.

    ``u_kernel``/``v_kernel`` fix the kernel family (and ``nu`` for Matérn).
    Their ``length_scale`` is used as-is when ``estimate_rho`` is false and is
    otherwise ignored in favour of the data-driven initial value.

    ``column_update`` selects how the sphere-restricted Gaussian conditional
    of each basis column is sampled: ``"normalize"`` draws from the
    unconstrained Gaussian and rescales to unit length, ``"exact"`` uses that
    draw as an independence proposal inside a Metropolis-Hastings step so the
    chain targets the exact conditional.

    ``rho_update="conditional"`` updates each length-scale given the
    current column.  When the data pin a column down this mixes slowly and
    the length-scale stays near where it started.  ``"joint"`` instead
    redraws the column from its conditional under the proposed
    length-scale, so the pair moves together.  It explores the posterior
    far faster, and with the diffuse half-t variance prior that posterior
    tends to run along the variance/length-scale ridge towards the upper
    bound of the length-scale.  Grouped length-scales always use the
    conditional move.
    """

    k: int
    u_kernel: KernelSpec = field(default_factory=lambda: KernelSpec.matern(1.0, 3.5))
    v_kernel: KernelSpec = field(default_factory=lambda: KernelSpec.matern(1.0, 3.5))
    estimate_rho: bool = True
    grouped_rho: bool = False
    nu_default: float = 3.5
    halft_xi: float = 1.0
    halft_A: float = 1e5
    beta_prior_sd: float = 10.0
    n_iterations: int = 10000
    n_burnin: int = 5000
    thin: int = 1
    seed: int = 0
    tune_window: int = 100
    column_update: str = "exact"
    rho_update: str = "conditional"
    sign_align: bool = True
    fixed: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "fixed", frozenset(self.fixed))
        if int(self.k) != self.k or self.k < 1:
            raise InputError(f"rank k must be a positive integer, got {self.k!r}")
        if self.n_iterations < 1 or self.n_burnin < 0 or self.n_burnin >= self.n_iterations:
            raise InputError(
                f"need 0 <= n_burnin < n_iterations, got burnin={self.n_burnin}, iterations={self.n_iterations}"
            )
        if self.thin < 1:
            raise InputError("thin must be >= 1")
        if (self.n_iterations - self.n_burnin) % self.thin:
            raise InputError("thin must divide n_iterations - n_burnin")
        if not (self.halft_xi > 0 and self.halft_A > 0 and self.beta_prior_sd > 0 and self.nu_default > 0):
            raise InputError("halft_xi, halft_A, beta_prior_sd and nu_default must be positive")
        if self.tune_window < 1:
            raise InputError("tune_window must be >= 1")
        if self.column_update not in COLUMN_UPDATES:
            raise InputError(f"column_update must be one of {COLUMN_UPDATES}, got {self.column_update!r}")
        if self.rho_update not in RHO_UPDATES:
            raise InputError(f"rho_update must be one of {RHO_UPDATES}, got {self.rho_update!r}")
        bad = set(self.fixed) - FIXABLE_PARAMS
        if bad:
            raise InputError(f"cannot fix unknown parameters {sorted(bad)}; valid: {sorted(FIXABLE_PARAMS)}")

    @property
    def n_retained(self) -> int:
        return (self.n_iterations - self.n_burnin) // self.thin

    def rho_estimated(self, side: str) -> bool:
        kern = self.u_kernel if side == "u" else self.v_kernel
        return self.estimate_rho and not kern.is_identity and f"rho_{side}" not in self.fixed

    def check_dims(self, n: int, m: int) -> None:
        if self.k > min(n, m):
            raise InputError(f"rank k={self.k} exceeds min(n, m)={min(n, m)}")

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, KernelSpec):
                val = val.to_dict()
            elif isinstance(val, frozenset):
                val = sorted(val)
            out[f.name] = val
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SvdModelConfig":
        valid = {f.name for f in fields(cls)}
        unknown = set(data) - valid
        if unknown:
            raise InputError(f"unknown model keys {sorted(unknown)}; valid keys: {sorted(valid)}")
        if "k" not in data:
            raise InputError("model config is missing required key 'k'")
        kw = dict(data)
        for side in ("u_kernel", "v_kernel"):
            if side in kw and isinstance(kw[side], dict):
                kw[side] = KernelSpec.from_dict(kw[side])
        if "fixed" in kw:
            kw["fixed"] = frozenset(kw["fixed"])
        return cls(**kw)

    def replace(self, **changes) -> "SvdModelConfig":
        return replace(self, **changes)


@dataclass
class SvdModelState:
    """Parameter values at one MCMC iteration."""

    U: np.ndarray
    V: np.ndarray
    d: np.ndarray
    sigma2: float
    sigma2_u: np.ndarray
    sigma2_v: np.ndarray
    rho_u: np.ndarray
    rho_v: np.ndarray
    beta: np.ndarray | None = None
    aux_a: float = 1.0
    aux_a_u: np.ndarray | None = None
    aux_a_v: np.ndarray | None = None

    def __post_init__(self):
        k = self.U.shape[1]
        if self.aux_a_u is None:
            self.aux_a_u = np.ones(k)
        if self.aux_a_v is None:
            self.aux_a_v = np.ones(k)

    @property
    def k(self) -> int:
        return self.U.shape[1]

    def copy(self) -> "SvdModelState":
        return SvdModelState(
            self.U.copy(),
            self.V.copy(),
            self.d.copy(),
            float(self.sigma2),
            self.sigma2_u.copy(),
            self.sigma2_v.copy(),
            self.rho_u.copy(),
            self.rho_v.copy(),
            None if self.beta is None else self.beta.copy(),
            float(self.aux_a),
            self.aux_a_u.copy(),
            self.aux_a_v.copy(),
        )

    def signal(self) -> np.ndarray:
        """``U diag(d) V'``."""
        return (self.U * self.d) @ self.V.T

    def validate(self, tol: float = ORTHO_TOL) -> None:
        k = self.k
        if self.V.shape[1] != k or self.d.shape != (k,):
            raise InputError("U, V and d disagree on the rank")
        for name, w in (("U", self.U), ("V", self.V)):
            err = orthonormality_error(w)
            if err >= tol:
                raise InputError(f"{name} is not orthonormal (max |W'W - I| = {err:.2e})")
        for name in ("d", "sigma2", "sigma2_u", "sigma2_v", "rho_u", "rho_v"):
            if not np.all(np.asarray(getattr(self, name)) > 0):
                raise InputError(f"{name} must be strictly positive")


@dataclass
class ResidualView:
    """``E_{-i} = Z - M - sum_{j != i} d_j u_j v_j'`` for one column ``i``."""

    column: int
    E_minus_i: np.ndarray


def mean_matrix(x_design: np.ndarray | None, beta: np.ndarray | None, n: int, m: int) -> np.ndarray:
    """Reshape ``X beta`` (column-major ``vec``) into an ``n x m`` matrix."""
    if x_design is None or beta is None:
        return np.zeros((n, m))
    return (x_design @ beta).reshape((n, m), order="F")


def _check_data(z: np.ndarray, state: SvdModelState, mean: np.ndarray | None) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    n, m = z.shape
    if state.U.shape[0] != n or state.V.shape[0] != m:
        raise InputError(f"state dimensions {state.U.shape[0]}x{state.V.shape[0]} do not match data {n}x{m}")
    if mean is not None and np.shape(mean) != z.shape:
        raise InputError("mean matrix shape does not match data")
    return z


def log_likelihood(z: np.ndarray, state: SvdModelState, mean: np.ndarray | None = None) -> float:
    """Matrix-normal log density of ``Z`` with row covariance ``sigma2 I`` and column covariance ``I``."""
    z = _check_data(z, state, mean)
    if not state.sigma2 > 0:
        raise InputError("sigma2 must be positive")
    resid = z - state.signal()
    if mean is not None:
        resid = resid - mean
    nm = z.size
    return float(-0.5 * nm * math.log(2.0 * math.pi * state.sigma2) - np.sum(resid * resid) / (2.0 * state.sigma2))


def residual_for_column(z: np.ndarray, mean: np.ndarray | None, state: SvdModelState, i: int) -> ResidualView:
    z = _check_data(z, state, mean)
    if not 0 <= i < state.k:
        raise InputError(f"column index {i} out of range for k={state.k}")
    keep = np.arange(state.k) != i
    e = z - (state.U[:, keep] * state.d[keep]) @ state.V[:, keep].T
    if mean is not None:
        e = e - mean
    return ResidualView(i, e)


def log_prior_column(d_i: float, w_tilde, null_basis, omega, side_dim: int | None = None) -> float:
    """Log prior of ``(d_i, w_tilde)`` for one basis column.

    Evaluates ``log N(d_i w_tilde; 0, N' Omega N) + (side_dim - k) log d_i``,
    where ``side_dim - k + 1 = len(w_tilde)``.
    """
    null_basis = np.asarray(null_basis, dtype=float)
    omega = np.asarray(omega, dtype=float)
    w_tilde = np.atleast_1d(np.asarray(w_tilde, dtype=float))
    if side_dim is not None and null_basis.shape[0] != side_dim:
        raise InputError(f"null basis has {null_basis.shape[0]} rows, expected {side_dim}")
    if null_basis.shape[1] != w_tilde.shape[0]:
        raise InputError("null basis and projected weights disagree in dimension")
    return projected_normal_logdensity(d_i, w_tilde, null_basis.T @ omega @ null_basis)
