import math
from types import SimpleNamespace

import numpy as np
import pytest

from structsvd.csvd import classical_svd
from structsvd.diagnostics import (
    CellSummary,
    PosteriorSummary,
    align_to_truth,
    column_coverage,
    column_rmse,
    coverage_rate,
    match_columns,
    rmse,
    rmse_ratio,
    summarize,
    summary_from_point,
)
from structsvd.errors import InputError
from structsvd.kernels import KernelSpec
from structsvd.model import SvdModelConfig
from structsvd.sampler import PosteriorChain, run_mcmc


def make_chain(u, v, d, reference=None):
    t, _, k = u.shape
    ones = np.ones((t, k))
    return PosteriorChain(u, v, d, np.ones(t), ones, ones, ones, ones, reference_U=reference)


def random_basis(rng, n, k):
    q, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return q


def truth_like(u, v, d):
    return SimpleNamespace(U=u, V=v, d=np.asarray(d, dtype=float), k=u.shape[1], Y=(u * d) @ v.T)


def sorted_quantile(x, p):
    # linear interpolation between order statistics at position (T - 1) p
    x = np.sort(x)
    h = (len(x) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(x) - 1)
    return x[lo] + (h - lo) * (x[hi] - x[lo])


def test_identical_states_are_degenerate():
    rng = np.random.default_rng(0)
    u, v = random_basis(rng, 5, 2), random_basis(rng, 4, 2)
    chain = make_chain(np.repeat(u[None], 6, 0), np.repeat(v[None], 6, 0), np.tile([3.0, 1.0], (6, 1)), u)
    s = summarize(chain)
    for name in ("U", "V", "Y", "A", "d"):
        np.testing.assert_allclose(s[name].sd, 0.0, atol=1e-15)
        np.testing.assert_allclose(s[name].lower, s[name].mean, atol=1e-14)
        np.testing.assert_allclose(s[name].upper, s[name].mean, atol=1e-14)


def test_two_state_mean():
    draws = np.array([[0.0, 0.0], [1.0, 1.0]])
    cs = CellSummary.from_draws(draws, 0.95)
    np.testing.assert_array_equal(cs.mean, [0.5, 0.5])
    assert np.all(cs.lower <= cs.mean) and np.all(cs.mean <= cs.upper)


def test_quantiles_match_sort_oracle():
    n, m = 6, 5
    rng = np.random.default_rng(1)
    z = (random_basis(rng, n, 2) * [6.0, 3.0]) @ random_basis(rng, m, 2).T + 0.3 * rng.standard_normal((n, m))
    cfg = SvdModelConfig(k=2, u_kernel=KernelSpec.identity(), v_kernel=KernelSpec.identity(), n_iterations=120,
                         n_burnin=20, seed=3)
    chain = run_mcmc(z, None, None, cfg)
    s = summarize(chain, level=0.9)
    for i, j in [(0, 0), (3, 1), (5, 0)]:
        x = chain.U[:, i, j]
        assert s["U"].lower[i, j] == pytest.approx(sorted_quantile(x, 0.05), rel=1e-12)
        assert s["U"].upper[i, j] == pytest.approx(sorted_quantile(x, 0.95), rel=1e-12)
    y = np.einsum("tik,tk,tjk->tij", chain.U, chain.d, chain.V)
    assert s["Y"].lower[4, 2] == pytest.approx(sorted_quantile(y[:, 4, 2], 0.05), rel=1e-12)
    np.testing.assert_allclose(s["Y"].mean, y.mean(axis=0), atol=1e-12)
    a = chain.d[:, 1] * chain.V[:, 3, 1]
    assert s["A"].upper[1, 3] == pytest.approx(sorted_quantile(a, 0.95), rel=1e-12)
    assert np.all(s["Y"].lower <= s["Y"].mean) and np.all(s["Y"].mean <= s["Y"].upper)


def test_summarize_aligns_signs():
    rng = np.random.default_rng(2)
    u, v = random_basis(rng, 5, 1), random_basis(rng, 4, 1)
    us = np.stack([u, -u, u])
    vs = np.stack([v, -v, v])
    s = summarize(make_chain(us, vs, np.ones((3, 1)), u))
    np.testing.assert_allclose(s["U"].mean, u, atol=1e-15)
    np.testing.assert_allclose(s["V"].mean, v, atol=1e-15)


def test_summarize_errors():
    rng = np.random.default_rng(3)
    u, v = random_basis(rng, 3, 1), random_basis(rng, 3, 1)
    chain = make_chain(u[None], v[None], np.ones((1, 1)))
    with pytest.raises(InputError):
        summarize(chain, 1.0)
    empty = make_chain(np.empty((0, 3, 1)), np.empty((0, 3, 1)), np.empty((0, 1)))
    with pytest.raises(InputError):
        summarize(empty)


def _interval_summary(mean, half):
    cells = {}
    for name, arr in mean.items():
        cells[name] = CellSummary(arr, np.zeros_like(arr), arr - half, arr + half)
    return PosteriorSummary(0.95, 10, cells)


def test_coverage_extremes():
    rng = np.random.default_rng(4)
    u, v = random_basis(rng, 6, 2), random_basis(rng, 5, 2)
    truth = truth_like(u, v, [4.0, 2.0])
    centred = _interval_summary({"U": u, "V": v, "Y": truth.Y}, 0.01)
    assert coverage_rate(centred, truth, "U") == 1.0
    assert coverage_rate(centred, truth, "Y") == 1.0
    shifted = _interval_summary({"U": u + 1.0, "V": v + 1.0, "Y": truth.Y + 1.0}, 0.01)
    assert coverage_rate(shifted, truth, "V") == 0.0
    assert coverage_rate(shifted, truth, "Y") == 0.0


def test_rmse_zero_and_offset():
    rng = np.random.default_rng(5)
    u, v = random_basis(rng, 6, 2), random_basis(rng, 5, 2)
    truth = truth_like(u, v, [4.0, 2.0])
    exact = summary_from_point(SimpleNamespace(U=u, V=v, d=truth.d, reconstruct=lambda: truth.Y))
    assert rmse(exact, truth, "U") == 0.0 and rmse(exact, truth, "Y") == 0.0
    off = _interval_summary({"U": u - 0.3, "V": v, "Y": truth.Y + 0.3}, 0.0)
    assert rmse(off, truth, "U") == pytest.approx(0.3, rel=1e-14)
    assert rmse(off, truth, "Y") == pytest.approx(0.3, rel=1e-14)


def test_extra_columns_score_against_zero_and_missing_are_skipped():
    rng = np.random.default_rng(6)
    u, v = random_basis(rng, 6, 2), random_basis(rng, 5, 2)
    truth = truth_like(u, v, [4.0, 2.0])
    extra_u = np.column_stack([u, np.full(6, 0.2)])
    wide = _interval_summary({"U": extra_u, "V": np.column_stack([v, np.zeros(5)]), "Y": truth.Y}, 0.1)
    np.testing.assert_array_equal(column_coverage(wide, truth, "U"), [1.0, 1.0, 0.0])
    np.testing.assert_allclose(column_rmse(wide, truth, "U"), [0.0, 0.0, 0.2], atol=1e-15)
    assert coverage_rate(wide, truth, "U") == pytest.approx(2 / 3)
    narrow = _interval_summary({"U": u[:, :1], "V": v[:, :1], "Y": truth.Y}, 0.1)
    np.testing.assert_array_equal(column_coverage(narrow, truth, "U"), [1.0])


def test_sign_and_permutation_invariance():
    rng = np.random.default_rng(7)
    u, v = random_basis(rng, 8, 3), random_basis(rng, 7, 3)
    truth = truth_like(u, v, [5.0, 3.0, 1.0])
    noisy_u = u + 0.05 * rng.standard_normal(u.shape)
    noisy_v = v + 0.05 * rng.standard_normal(v.shape)
    base = _interval_summary({"U": noisy_u, "V": noisy_v, "Y": truth.Y, "A": truth.d[:, None] * noisy_v.T}, 0.04)
    ref = [coverage_rate(align_to_truth(base, truth), truth, t) for t in "UV"]
    ref_rmse = [rmse(align_to_truth(base, truth), truth, t) for t in "UV"]
    signs = np.array([-1.0, 1.0, -1.0])
    flipped = PosteriorSummary(0.95, 10, {
        "U": base["U"].flip_columns(signs, 1), "V": base["V"].flip_columns(signs, 1), "Y": base["Y"],
        "A": base["A"].flip_columns(signs, 0),
    })
    assert [coverage_rate(align_to_truth(flipped, truth), truth, t) for t in "UV"] == ref
    assert [rmse(align_to_truth(flipped, truth), truth, t) for t in "UV"] == pytest.approx(ref_rmse, rel=1e-14)

    perm = [2, 0, 1]
    shuffled = PosteriorSummary(0.95, 10, {
        "U": base["U"].take_columns(perm, 1), "V": base["V"].take_columns(perm, 1), "Y": base["Y"],
        "A": base["A"].take_columns(perm, 0),
    })
    matched = align_to_truth(shuffled, truth, match="greedy")
    assert [coverage_rate(matched, truth, t) for t in "UV"] == ref
    assert rmse(shuffled, truth, "Y") == rmse(base, truth, "Y")


def test_match_columns_greedy():
    t = np.eye(4)[:, :3]
    est = t[:, [1, 2, 0]] * [1.0, -1.0, 1.0]
    np.testing.assert_array_equal(match_columns(est, t), [2, 0, 1])
    wider = np.column_stack([est, np.eye(4)[:, 3]])
    np.testing.assert_array_equal(match_columns(wider, t), [2, 0, 1, 3])
    with pytest.raises(InputError):
        align_to_truth(_interval_summary({"U": t, "V": t, "Y": t, "A": t.T}, 0.1), truth_like(t, t, [1, 1, 1]),
                       match="hungarian")


def test_rmse_ratio_columnwise():
    rng = np.random.default_rng(8)
    u, v = random_basis(rng, 6, 2), random_basis(rng, 5, 2)
    truth = truth_like(u, v, [4.0, 2.0])
    a = _interval_summary({"U": u + [0.1, 0.4], "V": v, "Y": truth.Y}, 0.0)
    b = _interval_summary({"U": u + [0.2, 0.2], "V": v, "Y": truth.Y}, 0.0)
    np.testing.assert_allclose(rmse_ratio(a, b, truth, "U"), [0.5, 2.0], rtol=1e-13)


def test_flip_swaps_bounds():
    cs = CellSummary(np.array([[1.0, 2.0]]), np.zeros((1, 2)), np.array([[0.5, 1.0]]), np.array([[1.5, 3.0]]))
    f = cs.flip_columns(np.array([-1.0, 1.0]), axis=1)
    np.testing.assert_array_equal(f.lower, [[-1.5, 1.0]])
    np.testing.assert_array_equal(f.upper, [[-0.5, 3.0]])
    np.testing.assert_array_equal(f.mean, [[-1.0, 2.0]])


def test_point_summary_for_csvd():
    z = np.random.default_rng(9).standard_normal((5, 4))
    s = summary_from_point(classical_svd(z, 2))
    assert s.k == 2 and "d" in s and s["A"].mean.shape == (2, 4)
    np.testing.assert_array_equal(s["Y"].lower, s["Y"].upper)
