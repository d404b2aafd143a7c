"""Posterior summaries, coverage and RMSE metrics, and column alignment.

Credible intervals are equal-tailed and use linear-interpolated sample
quantiles (``numpy.quantile`` default).  Basis metrics are computed per
column and then averaged with equal column weights.  Fitted columns beyond
the true rank are scored against zero; when fewer columns are fitted than
the truth has, only the fitted ones are scored.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .csvd import TruncatedSvd
from .errors import InputError

__all__ = [
    "CellSummary",
    "PosteriorSummary",
    "summarize",
    "summary_from_point",
    "align_to_truth",
    "match_columns",
    "coverage_rate",
    "column_coverage",
    "rmse",
    "column_rmse",
    "rmse_ratio",
    "TARGETS",
]

log = logging.getLogger(__name__)

TARGETS = ("U", "V", "Y", "A")
_ROW_BLOCK = 16


@dataclass
class CellSummary:
    """Element-wise mean, sd and equal-tailed interval of one parameter."""

    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def from_draws(cls, draws: np.ndarray, level: float) -> "CellSummary":
        draws = np.asarray(draws, dtype=float)
        tail = 0.5 * (1.0 - level)
        lo, hi = np.quantile(draws, [tail, 1.0 - tail], axis=0)
        sd = draws.std(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(draws.shape[1:])
        return cls(draws.mean(axis=0), sd, lo, hi)

    def flip_columns(self, signs: np.ndarray, axis: int = -1) -> "CellSummary":
        """Negate selected columns; the interval bounds swap where the sign is negative."""
        shape = [1] * self.mean.ndim
        shape[axis] = -1
        s = np.asarray(signs, dtype=float).reshape(shape)
        neg = s < 0
        lower = np.where(neg, -self.upper, self.lower)
        upper = np.where(neg, -self.lower, self.upper)
        return CellSummary(self.mean * s, self.sd.copy(), lower, upper)

    def take_columns(self, order, axis: int = -1) -> "CellSummary":
        return CellSummary(*(np.take(a, order, axis=axis) for a in (self.mean, self.sd, self.lower, self.upper)))

    def covers(self, truth: np.ndarray) -> np.ndarray:
        return (self.lower <= truth) & (truth <= self.upper)


@dataclass
class PosteriorSummary:
    """Per-parameter :class:`CellSummary` objects at credible mass ``level``.

    ``cells`` holds ``U (n, k)``, ``V (m, k)``, ``Y (n, m)``, ``A (k, m)``,
    ``d``, ``sigma2``, ``sigma2_u``, ``sigma2_v``, ``rho_u``, ``rho_v`` and,
    when present, ``beta``.
    """

    level: float
    n_draws: int
    cells: dict[str, CellSummary] = field(default_factory=dict)

    def __getitem__(self, name: str) -> CellSummary:
        try:
            return self.cells[name]
        except KeyError:
            raise KeyError(f"no summary for {name!r}; have {sorted(self.cells)}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.cells

    @property
    def k(self) -> int:
        return self.cells["U"].mean.shape[1]


def _check_level(level: float) -> float:
    level = float(level)
    if not 0.0 < level < 1.0:
        raise InputError(f"credible level must be in (0, 1), got {level}")
    return level


def _aligned_bases(chain, reference: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    u, v = chain.U, chain.V
    if reference is None:
        return u, v
    signs = np.sign(np.einsum("tik,ik->tk", u, reference))
    signs[signs == 0] = 1.0
    return u * signs[:, None, :], v * signs[:, None, :]


def _signal_summary(u: np.ndarray, d: np.ndarray, v: np.ndarray, level: float) -> CellSummary:
    # blocks of rows keep memory at O(T * block * m)
    n, m = u.shape[1], v.shape[1]
    parts = []
    for start in range(0, n, _ROW_BLOCK):
        rows = slice(start, min(start + _ROW_BLOCK, n))
        draws = np.einsum("tik,tk,tjk->tij", u[:, rows, :], d, v, optimize=True)
        parts.append(CellSummary.from_draws(draws, level))
    return CellSummary(*(np.concatenate([getattr(p, a) for p in parts], axis=0).reshape(n, m)
                         for a in ("mean", "sd", "lower", "upper")))


def summarize(chain, level: float = 0.95) -> PosteriorSummary:
    """Summarize retained draws of a :class:`~structsvd.sampler.PosteriorChain`.

    Draws are sign-aligned to ``chain.reference_U`` first (a no-op when the
    sampler already aligned them).
    """
    level = _check_level(level)
    if len(chain) == 0:
        raise InputError("cannot summarize an empty chain")
    u, v = _aligned_bases(chain, chain.reference_U)
    cells = {
        "U": CellSummary.from_draws(u, level),
        "V": CellSummary.from_draws(v, level),
        "Y": _signal_summary(u, chain.d, v, level),
        "A": CellSummary.from_draws(chain.d[:, :, None] * np.transpose(v, (0, 2, 1)), level),
    }
    for name in ("d", "sigma2", "sigma2_u", "sigma2_v", "rho_u", "rho_v", "beta"):
        draws = getattr(chain, name)
        if draws is not None:
            cells[name] = CellSummary.from_draws(draws, level)
    return PosteriorSummary(level, len(chain), cells)


def summary_from_point(est: TruncatedSvd) -> PosteriorSummary:
    """Degenerate summary (zero width) for a point estimate such as the classical SVD."""

    def point(x):
        x = np.asarray(x, dtype=float)
        return CellSummary(x.copy(), np.zeros_like(x), x.copy(), x.copy())

    return PosteriorSummary(
        0.0,
        1,
        {
            "U": point(est.U),
            "V": point(est.V),
            "Y": point(est.reconstruct()),
            "A": point(est.d[:, None] * est.V.T),
            "d": point(est.d),
        },
    )


def match_columns(est: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Greedy matching of estimated to true columns on ``|cos|``.

    Returns ``order`` with ``est[:, order[j]]`` matched to ``truth[:, j]`` for
    ``j < min(k_est, k_true)``, followed by the unmatched estimated columns.
    """
    a = est / np.maximum(np.linalg.norm(est, axis=0), 1e-300)
    b = truth / np.maximum(np.linalg.norm(truth, axis=0), 1e-300)
    sim = np.abs(a.T @ b)
    k_est, k_true = sim.shape
    order = np.full(min(k_est, k_true), -1)
    used_e, used_t = set(), set()
    for flat in np.argsort(-sim, axis=None, kind="stable"):
        i, j = divmod(int(flat), k_true)
        if i in used_e or j in used_t:
            continue
        order[j] = i
        used_e.add(i)
        used_t.add(j)
        if len(used_t) == order.size:
            break
    rest = [i for i in range(k_est) if i not in used_e]
    return np.concatenate([order, rest]).astype(int)


def align_to_truth(summary: PosteriorSummary, truth, match: str = "index") -> PosteriorSummary:
    """Reorder (optionally) and sign-flip summary columns to agree with ``truth``.

    ``match="index"`` keeps the fitted order, which the classical-SVD start
    ties to decreasing singular values.  ``match="greedy"`` uses
    :func:`match_columns` on the posterior-mean ``U`` and logs any change.
    """
    if match not in ("index", "greedy"):
        raise InputError(f"match must be 'index' or 'greedy', got {match!r}")
    cells = dict(summary.cells)
    if match == "greedy":
        order = match_columns(cells["U"].mean, truth.U)
        if not np.array_equal(order, np.arange(order.size)):
            log.info("greedy column matching reordered fitted columns to %s", order.tolist())
        for name in ("U", "V"):
            cells[name] = cells[name].take_columns(order, axis=1)
        cells["A"] = cells["A"].take_columns(order, axis=0)
        for name in ("d", "sigma2_u", "sigma2_v", "rho_u", "rho_v"):
            if name in cells:
                cells[name] = cells[name].take_columns(order, axis=0)
    k = min(cells["U"].mean.shape[1], truth.k)
    dots = np.sum(cells["U"].mean[:, :k] * truth.U[:, :k], axis=0)
    signs = np.ones(cells["U"].mean.shape[1])
    signs[:k] = np.where(dots < 0, -1.0, 1.0)
    cells["U"] = cells["U"].flip_columns(signs, axis=1)
    cells["V"] = cells["V"].flip_columns(signs, axis=1)
    cells["A"] = cells["A"].flip_columns(signs, axis=0)
    return PosteriorSummary(summary.level, summary.n_draws, cells)


def _truth_for(target: str, truth, k_fit: int) -> np.ndarray:
    if target == "Y":
        return truth.Y
    if target == "A":
        base = truth.d[:, None] * truth.V.T
        out = np.zeros((k_fit, base.shape[1]))
    else:
        base = truth.U if target == "U" else truth.V
        out = np.zeros((base.shape[0], k_fit))
    kk = min(k_fit, truth.k)
    if target == "A":
        out[:kk] = base[:kk]
    else:
        out[:, :kk] = base[:, :kk]
    return out


def _check_target(target: str) -> str:
    if target not in TARGETS:
        raise InputError(f"target must be one of {TARGETS}, got {target!r}")
    return target


def column_coverage(summary: PosteriorSummary, truth, target: str) -> np.ndarray:
    """Per-column coverage for ``U``/``V``/``A``; a length-1 array (all cells) for ``Y``."""
    target = _check_target(target)
    cell = summary[target]
    ref = _truth_for(target, truth, summary.k)
    hit = cell.covers(ref)
    if target == "Y":
        return np.array([hit.mean()])
    return hit.mean(axis=1 if target == "A" else 0)


def coverage_rate(summary: PosteriorSummary, truth, target: str = "U") -> float:
    """Equal-weight average of per-column coverage; ``summary`` should be aligned first."""
    return float(column_coverage(summary, truth, target).mean())


def column_rmse(summary: PosteriorSummary, truth, target: str) -> np.ndarray:
    """Per-column RMSE of the posterior mean; a length-1 array (all cells) for ``Y``."""
    target = _check_target(target)
    err = summary[target].mean - _truth_for(target, truth, summary.k)
    if target == "Y":
        return np.array([np.sqrt(np.mean(err**2))])
    return np.sqrt(np.mean(err**2, axis=1 if target == "A" else 0))


def rmse(summary: PosteriorSummary, truth, target: str = "U") -> float:
    return float(column_rmse(summary, truth, target).mean())


def rmse_ratio(numerator: PosteriorSummary, denominator: PosteriorSummary, truth, target: str = "U") -> np.ndarray:
    """Column-wise ``RMSE(numerator) / RMSE(denominator)``, e.g. variable over grouped length-scales."""
    return column_rmse(numerator, truth, target) / column_rmse(denominator, truth, target)
