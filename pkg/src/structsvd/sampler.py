"""Metropolis-within-Gibbs sampler for the structured Bayesian SVD.

One sweep updates, in order:

1. ``d`` (one truncated-normal Metropolis step per entry),
2. the columns of ``U`` (Gaussian conditional in null-space coordinates),
3. the columns of ``V``,
4. ``sigma2`` and its half-t auxiliary,
5. ``sigma2_u`` and auxiliaries,
6. ``sigma2_v`` and auxiliaries,
7. ``rho_u`` (truncated-normal Metropolis on ``(0, diameter_u / 2]``),
8. ``rho_v``,

followed by the conjugate ``beta`` draw when a design matrix is present.
Proposal standard deviations adapt during burn-in only.

Per sweep the cost is ``O(k (n^3 + m^3))``: each column update needs a
null-space basis and a dense factorization of the projected correlation.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, special

from .csvd import classical_svd
from .errors import InputError, NumericalError
from .kernels import CoordinateSet, KernelSpec, distance_matrix, jittered_cholesky, kernel_from_distance
from .model import SvdModelConfig, SvdModelState, mean_matrix
from .stiefel import null_space_basis

__all__ = [
    "ProposalTuner",
    "PosteriorChain",
    "SamplerError",
    "GibbsSampler",
    "run_mcmc",
    "sample_inverse_gamma",
    "truncnorm_draw",
    "truncnorm_logmass",
    "log_radial_integral",
]

log = logging.getLogger(__name__)


class SamplerError(NumericalError):
    """A numerical failure inside a sweep, tagged with where it happened."""

    def __init__(self, message: str, iteration: int, parameter: str):
        super().__init__(f"iteration {iteration}, parameter {parameter}: {message}")
        self.iteration = iteration
        self.parameter = parameter


# ---------------------------------------------------------------------------
# small distributions


def sample_inverse_gamma(rng: np.random.Generator, shape: float, rate: float) -> float:
    """One draw from IG(shape, rate), density proportional to ``x^(-shape-1) exp(-rate/x)``."""
    return rate / rng.gamma(shape)


def truncnorm_logmass(mean: float, sd: float, lo: float, hi: float) -> float:
    """``log P(lo < X < hi)`` for ``X ~ N(mean, sd^2)``."""
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    if a > 0:
        a, b = -b, -a
    if b == math.inf:
        return float(special.log_ndtr(-a))
    return float(math.log(special.ndtr(b) - special.ndtr(a)))


def truncnorm_draw(rng: np.random.Generator, mean: float, sd: float, lo: float, hi: float) -> float:
    """Inverse-CDF draw from ``N(mean, sd^2)`` restricted to ``(lo, hi)``."""
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    flip = a > 0
    if flip:
        a, b = -b, -a
    u = rng.uniform(special.ndtr(a), special.ndtr(b))
    x = float(np.clip(special.ndtri(u), a, b))
    if flip:
        x = -x
    out = mean + sd * x
    # guard the open interval against rounding at the bounds
    if out <= lo:
        out = np.nextafter(lo, math.inf)
    if out > hi:
        out = hi
    return out


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(96)


def log_radial_integral(a: float, b: float, p: int) -> float:
    """``log int_0^inf r^(p-1) exp(-a r^2 / 2 + b r) dr`` for ``a > 0``, ``p >= 1``.

    Up to a constant this is the log density, at a given direction, of the
    direction of a Gaussian vector: ``a`` is the precision quadratic form
    along the direction and ``b`` the linear term.
    """
    sa = math.sqrt(a)
    c = b / sa
    # substitute t = r sqrt(a); log integrand h(t) = (p-1) log t - t^2/2 + c t is concave
    t0 = 0.5 * (c + math.sqrt(c * c + 4.0 * (p - 1)))

    def h(t):
        return (p - 1) * np.log(t) - 0.5 * t * t + c * t if p > 1 else -0.5 * t * t + c * t

    h0 = float(h(t0)) if t0 > 0 else 0.0
    width = 1.0 / math.sqrt(1.0 + (p - 1) / (t0 * t0)) if t0 > 0 else 1.0 / max(-c, 1.0)
    drop = 46.0  # e^-46 ~ 1e-20 relative

    step = width
    hi = t0 + step
    while float(h(hi)) > h0 - drop:
        step *= 2.0
        hi = t0 + step
    lo = 0.0
    if t0 > 0:
        step = width
        lo = max(0.0, t0 - step)
        while lo > 0.0 and float(h(lo)) > h0 - drop:
            step *= 2.0
            lo = max(0.0, t0 - step)

    total = 0.0
    for left, right in ((lo, t0), (t0, hi)):
        if right <= left:
            continue
        half = 0.5 * (right - left)
        t = left + half * (_GL_NODES + 1.0)
        total += half * float(np.dot(_GL_WEIGHTS, np.exp(h(t) - h0)))
    return h0 + math.log(total) - p * math.log(sa)


# ---------------------------------------------------------------------------
# bookkeeping


class ProposalTuner:
    """Random-walk scale for one Metropolis parameter with windowed adaptation.

    After every ``window`` attempts (when adaptation is on) the scale is
    multiplied by 1.1 if the windowed acceptance rate exceeds the band's upper
    edge and by 0.9 if it falls below the lower edge.
    """

    def __init__(self, proposal_sd: float, window: int = 100, target_band: tuple[float, float] = (0.25, 0.45)):
        if not proposal_sd > 0:
            raise InputError("proposal_sd must be positive")
        self.proposal_sd = float(proposal_sd)
        self.window = int(window)
        self.target_band = target_band
        self.accept_count = 0
        self.attempt_count = 0
        self.total_accept = 0
        self.total_attempt = 0
        self.history: list[float] = []

    def record(self, accepted: bool) -> None:
        self.accept_count += bool(accepted)
        self.attempt_count += 1
        self.total_accept += bool(accepted)
        self.total_attempt += 1

    @property
    def window_rate(self) -> float:
        return self.accept_count / self.attempt_count if self.attempt_count else float("nan")

    @property
    def rate(self) -> float:
        return self.total_accept / self.total_attempt if self.total_attempt else float("nan")

    def adapt(self) -> None:
        """Rescale if a full window has accumulated, then reset the window."""
        if self.attempt_count < self.window:
            return
        rate = self.window_rate
        lo, hi = self.target_band
        if rate > hi:
            self.proposal_sd *= 1.1
        elif rate < lo:
            self.proposal_sd *= 0.9
        self.history.append(rate)
        self.reset_window()

    def reset_window(self) -> None:
        self.accept_count = 0
        self.attempt_count = 0

    def reset_totals(self) -> None:
        self.total_accept = 0
        self.total_attempt = 0
        self.reset_window()


@dataclass
class PosteriorChain:
    """Retained draws stacked along the first axis.

    ``U`` is ``(T, n, k)``, ``V`` is ``(T, m, k)``, per-column quantities are
    ``(T, k)`` and ``sigma2`` is ``(T,)``.  ``acceptance`` maps parameter
    names (``d[0]``, ``rho_u[2]``, ``U[1]``, ...) to post-burn-in acceptance
    rates.
    """

    U: np.ndarray
    V: np.ndarray
    d: np.ndarray
    sigma2: np.ndarray
    sigma2_u: np.ndarray
    sigma2_v: np.ndarray
    rho_u: np.ndarray
    rho_v: np.ndarray
    beta: np.ndarray | None = None
    acceptance: dict[str, float] = field(default_factory=dict)
    config: SvdModelConfig | None = None
    seed: int | None = None
    reference_U: np.ndarray | None = None
    runtime_seconds: float = 0.0

    def __len__(self) -> int:
        return self.d.shape[0]

    @property
    def k(self) -> int:
        return self.d.shape[1]

    def state(self, t: int) -> SvdModelState:
        return SvdModelState(
            self.U[t].copy(),
            self.V[t].copy(),
            self.d[t].copy(),
            float(self.sigma2[t]),
            self.sigma2_u[t].copy(),
            self.sigma2_v[t].copy(),
            self.rho_u[t].copy(),
            self.rho_v[t].copy(),
            None if self.beta is None else self.beta[t].copy(),
        )

    @property
    def states(self) -> list[SvdModelState]:
        return [self.state(t) for t in range(len(self))]

    def signal_draws(self) -> np.ndarray:
        """``(T, n, m)`` array of ``U D V'`` per draw."""
        return np.einsum("tik,tk,tjk->tij", self.U, self.d, self.V, optimize=True)

    def loading_draws(self) -> np.ndarray:
        """``(T, k, m)`` array of ``A = D V'`` per draw."""
        return self.d[:, :, None] * np.transpose(self.V, (0, 2, 1))


# ---------------------------------------------------------------------------
# per-side structures


@dataclass
class _Geometry:
    null_basis: np.ndarray
    w_tilde: np.ndarray
    chol: np.ndarray | None  # lower factor of N' C N; None for the identity kernel
    quad: float  # w' (N' C N)^{-1} w
    logdet: float  # log |N' C N|


class _Side:
    """Coordinates, kernels and cached factorizations for one of ``U`` / ``V``."""

    def __init__(self, name: str, dim: int, coords: CoordinateSet, kernel: KernelSpec, k: int):
        self.name = name
        self.dim = dim
        self.coords = coords
        self.kernel = kernel
        self.identity = kernel.is_identity
        self.dist = None if self.identity else distance_matrix(coords)
        self.diameter = coords.diameter()
        self.rho_max = self.diameter / 2.0
        self.k = k
        self.corr: list[np.ndarray | None] = [None] * k
        self.corr_rho = np.full(k, np.nan)
        self.geom: list[_Geometry | None] = [None] * k

    def correlation(self, rho: float) -> np.ndarray:
        """Jittered correlation matrix at length-scale ``rho``."""
        c = kernel_from_distance(self.kernel.with_length_scale(rho), self.dist)
        np.fill_diagonal(c, 1.0)
        _, eps = jittered_cholesky(c, what=f"C_{self.name}(rho={rho:.4g})")
        if eps:
            c[np.diag_indices_from(c)] += eps
        return c

    def set_rho(self, i: int, rho: float, corr: np.ndarray | None = None) -> None:
        if self.identity:
            return
        if corr is None:
            if self.corr_rho[i] == rho and self.corr[i] is not None:
                return
            # reuse a factor already built for the same rho in another column
            for j in range(self.k):
                if j != i and self.corr_rho[j] == rho and self.corr[j] is not None:
                    corr = self.corr[j]
                    break
            else:
                corr = self.correlation(rho)
        self.corr[i] = corr
        self.corr_rho[i] = rho

    def geometry(self, w: np.ndarray, i: int, corr: np.ndarray | None = None, null_basis=None) -> _Geometry:
        nb = null_space_basis(np.delete(w, i, axis=1), self.dim) if null_basis is None else null_basis
        wt = nb.T @ w[:, i]
        if self.identity:
            return _Geometry(nb, wt, None, float(wt @ wt), 0.0)
        c = self.corr[i] if corr is None else corr
        g = nb.T @ c @ nb
        lower, _ = jittered_cholesky(g, what=f"N'C N for {self.name}[{i}]")
        y = linalg.solve_triangular(lower, wt, lower=True, check_finite=False)
        return _Geometry(nb, wt, lower, float(y @ y), float(2.0 * np.sum(np.log(np.diag(lower)))))


# ---------------------------------------------------------------------------
# the sampler


def _coords_or_index(coords, dim: int, what: str) -> CoordinateSet:
    if coords is None:
        return CoordinateSet(np.arange(dim, dtype=float))
    coords = coords if isinstance(coords, CoordinateSet) else CoordinateSet(coords)
    if len(coords) != dim:
        raise InputError(f"{what} has {len(coords)} points but the data have {dim}")
    return coords


class GibbsSampler:
    """Holds the data, caches and tuners for one chain.

    Most users want :func:`run_mcmc`.  The class is exposed so individual
    conditional updates can be exercised (and so the data can be swapped
    between sweeps, as a joint-distribution test requires).
    """

    def __init__(
        self,
        z,
        config: SvdModelConfig,
        coords_u=None,
        coords_v=None,
        x_design=None,
        rng: np.random.Generator | None = None,
        state: SvdModelState | None = None,
    ):
        z = np.asarray(z, dtype=float)
        if z.ndim != 2:
            raise InputError("data must be a matrix")
        if not np.all(np.isfinite(z)):
            raise InputError("data contain non-finite values")
        n, m = z.shape
        config.check_dims(n, m)
        self.z = z
        self.n, self.m = n, m
        self.config = config
        self.k = config.k
        self.rng = np.random.default_rng(config.seed) if rng is None else rng
        self.u = _Side("u", n, _coords_or_index(coords_u, n, "coords_u"), config.u_kernel, self.k)
        self.v = _Side("v", m, _coords_or_index(coords_v, m, "coords_v"), config.v_kernel, self.k)
        for side in (self.u, self.v):
            if config.rho_estimated(side.name) and not side.rho_max > 0:
                raise InputError(f"cannot estimate rho_{side.name}: all coordinates coincide")

        if x_design is not None:
            x_design = np.asarray(x_design, dtype=float)
            if x_design.ndim == 1:
                x_design = x_design[:, None]
            if x_design.shape[0] != n * m:
                raise InputError(f"design matrix has {x_design.shape[0]} rows, expected n*m={n * m}")
            if not np.all(np.isfinite(x_design)):
                raise InputError("design matrix contains non-finite values")
            self.xtx = x_design.T @ x_design
        self.x = x_design

        self.state = self.initial_state() if state is None else state.copy()
        self.state.validate()
        if self.x is not None and self.state.beta is None:
            raise InputError("a design matrix needs an initial beta")
        self.reference_U = self.state.U.copy()

        self.tuners: dict[str, ProposalTuner] = {}
        sd_d = math.sqrt(self.state.sigma2)
        for i in range(self.k):
            self.tuners[f"d[{i}]"] = ProposalTuner(max(sd_d, 1e-3 * self.state.d[i]), config.tune_window)
        for side in (self.u, self.v):
            if config.rho_estimated(side.name):
                rho = getattr(self.state, f"rho_{side.name}")
                labels = [f"rho_{side.name}"] if config.grouped_rho else [f"rho_{side.name}[{i}]" for i in range(self.k)]
                for j, lab in enumerate(labels):
                    self.tuners[lab] = ProposalTuner(0.2 * rho[j], config.tune_window)
        self.column_moves = {"U": [0, 0], "V": [0, 0]}
        self.iteration = 0
        self.refresh()

    # -- setup ------------------------------------------------------------

    def initial_state(self) -> SvdModelState:
        """Classical-SVD start; see module docs of :mod:`structsvd.sampler`."""
        cfg, n, m, k = self.config, self.n, self.m, self.k
        beta = None
        mean = np.zeros((n, m))
        if self.x is not None:
            beta, *_ = np.linalg.lstsq(self.x, self.z.ravel(order="F"), rcond=None)
            mean = mean_matrix(self.x, beta, n, m)
        base = classical_svd(self.z - mean, k)
        scale = max(1.0, float(np.sqrt(np.mean(self.z**2))))
        d = np.maximum(base.d, 1e-6 * scale)
        resid = self.z - mean - base.reconstruct()
        sigma2 = max(float(np.mean(resid**2)), 1e-12 * scale**2)
        rho = {}
        for side in (self.u, self.v):
            kern = side.kernel
            if kern.is_identity:
                rho[side.name] = np.ones(k)
            elif cfg.rho_estimated(side.name):
                rho[side.name] = np.full(k, side.diameter / 10.0)
            else:
                rho[side.name] = np.full(k, float(kern.length_scale))
        return SvdModelState(
            base.U.copy(), base.V.copy(), d, sigma2, np.ones(k), np.ones(k), rho["u"], rho["v"], beta
        )

    def set_data(self, z) -> None:
        """Replace the data matrix (shape must not change) and refresh caches."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n, self.m):
            raise InputError("new data must keep the original shape")
        self.z = z
        self.refresh()

    def refresh(self) -> None:
        """Recompute residual, mean and all per-column factorizations from ``self.state``."""
        st = self.state
        self.mean = mean_matrix(self.x, st.beta, self.n, self.m)
        self.resid = self.z - self.mean - st.signal()
        for side in (self.u, self.v):
            rho = getattr(st, f"rho_{side.name}")
            for i in range(self.k):
                side.set_rho(i, float(rho[i]))
        self._refresh_geometry(self.u)
        self._refresh_geometry(self.v)

    def _refresh_geometry(self, side: _Side) -> None:
        w = self.state.U if side is self.u else self.state.V
        for i in range(self.k):
            side.geom[i] = side.geometry(w, i)

    # -- step 1: d ----------------------------------------------------------

    def _d_logtarget(self, d: float, a: float, prec: float, power: int) -> float:
        return -(d * d - 2.0 * d * a) / (2.0 * self.state.sigma2) - 0.5 * d * d * prec + power * math.log(d)

    def update_d(self) -> None:
        st = self.state
        power = self.n + self.m - 2 * self.k
        for i in range(self.k):
            tuner = self.tuners[f"d[{i}]"]
            ui, vi = st.U[:, i], st.V[:, i]
            di = st.d[i]
            a = float(ui @ self.resid @ vi) + di
            prec = self.u.geom[i].quad / st.sigma2_u[i] + self.v.geom[i].quad / st.sigma2_v[i]
            sd = tuner.proposal_sd
            prop = truncnorm_draw(self.rng, di, sd, 0.0, math.inf)
            log_ratio = (
                self._d_logtarget(prop, a, prec, power)
                - self._d_logtarget(di, a, prec, power)
                + truncnorm_logmass(di, sd, 0.0, math.inf)
                - truncnorm_logmass(prop, sd, 0.0, math.inf)
            )
            accept = math.log(self.rng.uniform()) < log_ratio
            tuner.record(accept)
            if accept:
                self.resid -= (prop - di) * np.outer(ui, vi)
                st.d[i] = prop

    # -- steps 2-3: basis columns ------------------------------------------

    def _column_conditional(self, side: _Side, i: int, nb: np.ndarray, proj_data: np.ndarray, scale_lik: float,
                            corr: np.ndarray | None = None, sample: bool = True):
        """Gaussian conditional of ``x = d_i w_tilde`` pieces in null-space coordinates.

        Returns ``(draw, quad_terms, log_marginal)``.  ``draw`` is one exact
        sample of the unconstrained Gaussian ``N(S^-1 m, S^-1)``;
        ``quad_terms(w)`` gives the precision quadratic form and linear term
        along a unit direction ``w`` (the inputs of the radial correction);
        ``log_marginal`` is, up to terms free of the correlation matrix, the
        log normalizing constant of that Gaussian (``None`` for the identity
        kernel).  With ``sample=False`` no random numbers are used and
        ``draw`` is ``None``.
        """
        st = self.state
        di = st.d[i]
        s2 = st.sigma2
        tau2 = (st.sigma2_u if side is self.u else st.sigma2_v)[i]
        mvec = di * proj_data / s2
        p = nb.shape[1]
        noise_var = s2 / scale_lik  # likelihood precision d^2 scale_lik / s2
        log_marginal = None
        if side.identity:
            post_var = 1.0 / (di * di * (1.0 / tau2 + scale_lik / s2))
            draw = post_var * mvec + math.sqrt(post_var) * self.rng.standard_normal(p) if sample else None
            chol_g = None
        else:
            g = nb.T @ (side.corr[i] if corr is None else corr) @ nb
            chol_g, _ = jittered_cholesky(g, what=f"N'C N for {side.name}[{i}]")
            # Matheron: prior draw f ~ N(0, tau2 G / d^2), pseudo-observation y = x + e, e ~ N(0, noise_var / d^2)
            a_mat = tau2 * (chol_g @ chol_g.T)
            kmat = a_mat + noise_var * np.eye(p)
            chol_k = linalg.cholesky(kmat, lower=True, check_finite=False)
            y = noise_var * mvec / (di * di)
            draw = None
            if sample:
                f = math.sqrt(tau2) / di * (chol_g @ self.rng.standard_normal(p))
                e = math.sqrt(noise_var) / di * self.rng.standard_normal(p)
                draw = f + a_mat @ linalg.cho_solve((chol_k, True), y - f - e, check_finite=False)
            # log N(y; 0, K / d^2) without the constants
            t = linalg.solve_triangular(chol_k, y, lower=True, check_finite=False)
            log_marginal = -float(np.sum(np.log(np.diag(chol_k)))) - 0.5 * di * di * float(t @ t)

        def quad_terms(w):
            if chol_g is None:
                qg = float(w @ w)
            else:
                t = linalg.solve_triangular(chol_g, w, lower=True, check_finite=False)
                qg = float(t @ t)
            a_coef = di * di * (qg / tau2 + scale_lik * float(w @ w) / s2)
            return a_coef, float(w @ mvec)

        return draw, quad_terms, log_marginal

    def _column_setup(self, side: _Side, i: int):
        """Null basis, projected data and likelihood scale for column ``i`` of one side."""
        st = self.state
        is_u = side is self.u
        w = st.U if is_u else st.V
        other = st.V if is_u else st.U
        e_minus = self.resid + st.d[i] * np.outer(st.U[:, i], st.V[:, i])
        nb = null_space_basis(np.delete(w, i, axis=1), side.dim)
        if is_u:
            proj_data = nb.T @ (e_minus @ other[:, i])
            scale_lik = 1.0
        else:
            proj_data = nb.T @ (e_minus.T @ other[:, i])
            scale_lik = float(other[:, i] @ other[:, i])
        w_cur = nb.T @ w[:, i]
        w_cur /= np.linalg.norm(w_cur)
        return nb, proj_data, scale_lik, e_minus, w_cur

    @staticmethod
    def _direction_weight(quad_terms, w: np.ndarray) -> float:
        # log of (target / proposal) at a unit direction, up to constants
        a, b = quad_terms(w)
        return -0.5 * a + b - log_radial_integral(a, b, len(w))

    def _commit_column(self, side: _Side, i: int, nb: np.ndarray, w_new: np.ndarray, e_minus: np.ndarray) -> None:
        st = self.state
        is_u = side is self.u
        w = st.U if is_u else st.V
        col = nb @ w_new
        col /= np.linalg.norm(col)
        w[:, i] = col
        if is_u and self.config.sign_align and col @ self.reference_U[:, i] < 0:
            st.U[:, i] *= -1.0
            st.V[:, i] *= -1.0
        self.resid = e_minus - st.d[i] * np.outer(st.U[:, i], st.V[:, i])

    def _update_column(self, side: _Side, i: int) -> None:
        nb, proj_data, scale_lik, e_minus, w_cur = self._column_setup(side, i)
        draw, quad_terms, _ = self._column_conditional(side, i, nb, proj_data, scale_lik)
        norm = np.linalg.norm(draw)
        if not norm > 0:
            raise NumericalError("zero-length column draw")
        w_new = draw / norm
        moves = self.column_moves["U" if side is self.u else "V"]
        if self.config.column_update == "exact":
            log_ratio = self._direction_weight(quad_terms, w_new) - self._direction_weight(quad_terms, w_cur)
            accept = math.log(self.rng.uniform()) < log_ratio
            moves[0] += accept
            moves[1] += 1
            if not accept:
                w_new = w_cur
        else:
            moves[0] += 1
            moves[1] += 1
        self._commit_column(side, i, nb, w_new, e_minus)

    def update_u_column(self, i: int) -> None:
        self._update_column(self.u, i)

    def update_v_column(self, i: int) -> None:
        self._update_column(self.v, i)

    # -- steps 4-6: variances ---------------------------------------------

    def update_sigma2(self) -> None:
        st, cfg = self.state, self.config
        xi, big_a = cfg.halft_xi, cfg.halft_A
        st.aux_a = sample_inverse_gamma(self.rng, 0.5 * (xi + 1.0), 1.0 / big_a**2 + xi / st.sigma2)
        sse = float(np.sum(self.resid * self.resid))
        st.sigma2 = sample_inverse_gamma(self.rng, 0.5 * (self.z.size + xi), xi / st.aux_a + 0.5 * sse)

    def update_column_variances(self, side: _Side) -> None:
        st, cfg = self.state, self.config
        xi, big_a = cfg.halft_xi, cfg.halft_A
        var = st.sigma2_u if side is self.u else st.sigma2_v
        aux = st.aux_a_u if side is self.u else st.aux_a_v
        shape = 0.5 * (side.dim - self.k + 1 + xi)
        for i in range(self.k):
            aux[i] = sample_inverse_gamma(self.rng, 0.5 * (xi + 1.0), 1.0 / big_a**2 + xi / var[i])
            q = side.geom[i].quad
            var[i] = sample_inverse_gamma(self.rng, shape, xi / aux[i] + 0.5 * st.d[i] ** 2 * q)

    # -- steps 7-8: length-scales -----------------------------------------

    def _rho_logtarget_terms(self, side: _Side, i: int, geom: _Geometry) -> float:
        tau2 = (self.state.sigma2_u if side is self.u else self.state.sigma2_v)[i]
        return -0.5 * geom.logdet - 0.5 * self.state.d[i] ** 2 * geom.quad / tau2

    def _joint_rho_column(self, side: _Side, i: int) -> None:
        """Move ``(rho_i, column i)`` together.

        Propose ``rho'`` from a truncated normal, draw the column from its
        conditional under ``rho'`` (as in the column update), and accept
        with the ratio of the column's Gaussian normalizing constants times
        the independence-sampler weights of both directions.
        """
        st = self.state
        rho = st.rho_u if side is self.u else st.rho_v
        tuner = self.tuners[f"rho_{side.name}[{i}]"]
        cur = float(rho[i])
        sd = tuner.proposal_sd
        prop = truncnorm_draw(self.rng, cur, sd, 0.0, side.rho_max)
        nb, proj_data, scale_lik, e_minus, w_cur = self._column_setup(side, i)
        try:
            corr = side.correlation(prop)
            draw, quad_new, marg_new = self._column_conditional(side, i, nb, proj_data, scale_lik, corr)
        except (NumericalError, linalg.LinAlgError) as exc:
            log.warning("rejecting rho_%s proposal %.4g: %s", side.name, prop, exc)
            tuner.record(False)
            return
        norm = np.linalg.norm(draw)
        if not norm > 0:
            tuner.record(False)
            return
        w_new = draw / norm
        # the reverse move needs the same quantities under the current rho
        _, quad_cur, marg_cur = self._column_conditional(side, i, nb, proj_data, scale_lik, sample=False)
        log_ratio = (marg_new + self._direction_weight(quad_new, w_new)) - (
            marg_cur + self._direction_weight(quad_cur, w_cur)
        )
        log_ratio += truncnorm_logmass(cur, sd, 0.0, side.rho_max) - truncnorm_logmass(prop, sd, 0.0, side.rho_max)
        accept = math.log(self.rng.uniform()) < log_ratio
        tuner.record(accept)
        if accept:
            rho[i] = prop
            side.set_rho(i, prop, corr)
            self._commit_column(side, i, nb, w_new, e_minus)
            # every column's null space depends on column i
            self._refresh_geometry(side)

    def update_rho(self, side: _Side) -> None:
        st = self.state
        rho = st.rho_u if side is self.u else st.rho_v
        if (self.config.rho_update == "joint" and not self.config.grouped_rho
                and side.name.upper() not in self.config.fixed):
            for i in range(self.k):
                self._joint_rho_column(side, i)
            return
        groups = [list(range(self.k))] if self.config.grouped_rho else [[i] for i in range(self.k)]
        for g, cols in enumerate(groups):
            label = f"rho_{side.name}" if self.config.grouped_rho else f"rho_{side.name}[{cols[0]}]"
            tuner = self.tuners[label]
            cur = float(rho[cols[0]])
            sd = tuner.proposal_sd
            prop = truncnorm_draw(self.rng, cur, sd, 0.0, side.rho_max)
            try:
                corr = side.correlation(prop)
                new_geom = [self._geometry_with(side, i, corr) for i in cols]
            except NumericalError as exc:
                log.warning("rejecting rho_%s proposal %.4g: %s", side.name, prop, exc)
                tuner.record(False)
                continue
            log_ratio = sum(
                self._rho_logtarget_terms(side, i, ng) - self._rho_logtarget_terms(side, i, side.geom[i])
                for i, ng in zip(cols, new_geom)
            )
            log_ratio += truncnorm_logmass(cur, sd, 0.0, side.rho_max) - truncnorm_logmass(prop, sd, 0.0, side.rho_max)
            accept = math.log(self.rng.uniform()) < log_ratio
            tuner.record(accept)
            if accept:
                for i, ng in zip(cols, new_geom):
                    rho[i] = prop
                    side.set_rho(i, prop, corr)
                    side.geom[i] = ng

    def _geometry_with(self, side: _Side, i: int, corr: np.ndarray) -> _Geometry:
        old = side.geom[i]
        nb, wt = old.null_basis, old.w_tilde
        g = nb.T @ corr @ nb
        lower, _ = jittered_cholesky(g, what=f"N'C N for {side.name}[{i}]")
        y = linalg.solve_triangular(lower, wt, lower=True, check_finite=False)
        return _Geometry(nb, wt, lower, float(y @ y), float(2.0 * np.sum(np.log(np.diag(lower)))))

    # -- covariates --------------------------------------------------------

    def update_beta(self) -> None:
        st = self.state
        s2 = st.sigma2
        p = self.x.shape[1]
        q = self.xtx / s2 + np.eye(p) / self.config.beta_prior_sd**2
        target = (self.z - st.signal()).ravel(order="F")
        b = self.x.T @ target / s2
        try:
            chol = linalg.cholesky(q, lower=True, check_finite=False)
        except linalg.LinAlgError as exc:
            raise NumericalError("beta posterior precision is singular") from exc
        mu = linalg.cho_solve((chol, True), b, check_finite=False)
        st.beta = mu + linalg.solve_triangular(chol.T, self.rng.standard_normal(p), lower=False, check_finite=False)
        self.mean = mean_matrix(self.x, st.beta, self.n, self.m)
        self.resid = self.z - self.mean - st.signal()

    # -- sweep -------------------------------------------------------------

    def _guard(self, parameter: str, fn: Callable, *args) -> None:
        try:
            fn(*args)
        except (NumericalError, linalg.LinAlgError, np.linalg.LinAlgError) as exc:
            if isinstance(exc, SamplerError):
                raise
            raise SamplerError(str(exc), self.iteration, parameter) from exc

    def sweep(self) -> None:
        """One full Gibbs sweep over all non-fixed parameters."""
        fixed = self.config.fixed
        if "d" not in fixed:
            self._guard("d", self.update_d)
        if "U" not in fixed:
            for i in range(self.k):
                self._guard(f"U[{i}]", self.update_u_column, i)
        if "V" not in fixed:
            for i in range(self.k):
                self._guard(f"V[{i}]", self.update_v_column, i)
        if "sigma2" not in fixed:
            self._guard("sigma2", self.update_sigma2)
        self._guard("geometry", self._refresh_geometry, self.u)
        self._guard("geometry", self._refresh_geometry, self.v)
        if "sigma2_u" not in fixed:
            self._guard("sigma2_u", self.update_column_variances, self.u)
        if "sigma2_v" not in fixed:
            self._guard("sigma2_v", self.update_column_variances, self.v)
        if self.config.rho_estimated("u"):
            self._guard("rho_u", self.update_rho, self.u)
        if self.config.rho_estimated("v"):
            self._guard("rho_v", self.update_rho, self.v)
        if self.x is not None and "beta" not in fixed:
            self._guard("beta", self.update_beta)
        self.iteration += 1

    def adapt(self) -> None:
        for tuner in self.tuners.values():
            tuner.adapt()

    def acceptance_rates(self) -> dict[str, float]:
        out = {name: t.rate for name, t in self.tuners.items()}
        for name, (acc, att) in self.column_moves.items():
            if att:
                out[name] = acc / att
        return out

    def run(self, progress: Callable[[int], None] | None = None) -> PosteriorChain:
        cfg = self.config
        t_total = cfg.n_retained
        n, m, k = self.n, self.m, self.k
        p = None if self.x is None else self.x.shape[1]
        out = {
            "U": np.empty((t_total, n, k)),
            "V": np.empty((t_total, m, k)),
            "d": np.empty((t_total, k)),
            "sigma2": np.empty(t_total),
            "sigma2_u": np.empty((t_total, k)),
            "sigma2_v": np.empty((t_total, k)),
            "rho_u": np.empty((t_total, k)),
            "rho_v": np.empty((t_total, k)),
        }
        betas = None if p is None else np.empty((t_total, p))
        start = time.perf_counter()
        t = 0
        for it in range(cfg.n_iterations):
            if it == cfg.n_burnin:
                for tuner in self.tuners.values():
                    tuner.reset_totals()
                self.column_moves = {"U": [0, 0], "V": [0, 0]}
            self.sweep()
            if it < cfg.n_burnin and (it + 1) % cfg.tune_window == 0:
                self.adapt()
            if it >= cfg.n_burnin and (it - cfg.n_burnin + 1) % cfg.thin == 0:
                st = self.state
                out["U"][t] = st.U
                out["V"][t] = st.V
                out["d"][t] = st.d
                out["sigma2"][t] = st.sigma2
                out["sigma2_u"][t] = st.sigma2_u
                out["sigma2_v"][t] = st.sigma2_v
                out["rho_u"][t] = st.rho_u
                out["rho_v"][t] = st.rho_v
                if betas is not None:
                    betas[t] = st.beta
                t += 1
            if progress is not None:
                progress(it)
        return PosteriorChain(
            beta=betas,
            acceptance=self.acceptance_rates(),
            config=cfg,
            seed=cfg.seed,
            reference_U=self.reference_U,
            runtime_seconds=time.perf_counter() - start,
            **out,
        )


def run_mcmc(
    z,
    coords_u,
    coords_v,
    config: SvdModelConfig,
    x_design=None,
    rng: np.random.Generator | None = None,
    progress: Callable[[int], None] | None = None,
) -> PosteriorChain:
    """Fit the model and return the retained post-burn-in draws.

    ``rng`` defaults to ``numpy.random.default_rng(config.seed)``; a fixed
    seed gives bit-identical chains.
    """
    sampler = GibbsSampler(z, config, coords_u, coords_v, x_design, rng)
    return sampler.run(progress)
