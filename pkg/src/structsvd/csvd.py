"""Classical truncated SVD baseline and its comparison against posterior means."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import InputError

__all__ = ["TruncatedSvd", "classical_svd", "sign_convention", "csvd_equivalence_gap", "cosine_similarity"]


@dataclass
class TruncatedSvd:
    U: np.ndarray
    d: np.ndarray
    V: np.ndarray

    @property
    def k(self) -> int:
        return self.d.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.d) @ self.V.T


def sign_convention(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip paired columns so the largest-magnitude entry of each ``u_i`` is positive."""
    u = u.copy()
    v = v.copy()
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, v * signs


def classical_svd(z, k: int) -> TruncatedSvd:
    """Leading ``k`` singular triplets of ``z`` (LAPACK ``gesdd``)."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2:
        raise InputError("data must be a matrix")
    n, m = z.shape
    if int(k) != k or not 1 <= k <= min(n, m):
        raise InputError(f"k must be in [1, {min(n, m)}], got {k}")
    u, s, vt = linalg.svd(z, full_matrices=False, check_finite=False)
    uk, vk = sign_convention(u[:, :k], vt[:k].T)
    return TruncatedSvd(uk, s[:k].copy(), vk)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise ``|cos angle(a_i, b_i)|``."""
    num = np.abs(np.sum(a * b, axis=0))
    den = np.linalg.norm(a, axis=0) * np.linalg.norm(b, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / den, 0.0)
    return out


def csvd_equivalence_gap(chain, z) -> dict[str, np.ndarray]:
    """Per-column ``|cos|`` between posterior-mean bases and the classical SVD bases.

    Returns ``{"U": (k,), "V": (k,)}``.
    """
    base = classical_svd(z, chain.k)
    return {
        "U": cosine_similarity(chain.U.mean(axis=0), base.U),
        "V": cosine_similarity(chain.V.mean(axis=0), base.V),
    }
