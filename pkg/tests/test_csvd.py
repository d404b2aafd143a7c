from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structsvd.csvd import classical_svd, cosine_similarity, csvd_equivalence_gap, sign_convention
from structsvd.errors import InputError


def test_diagonal():
    out = classical_svd(np.diag([3.0, 1.0]), 2)
    np.testing.assert_allclose(out.d, [3, 1])
    np.testing.assert_allclose(out.U, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(out.V, np.eye(2), atol=1e-15)


def test_rank_one():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(6)
    b = rng.standard_normal(4)
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    out = classical_svd(2.0 * np.outer(a, b), 1)
    assert out.d[0] == pytest.approx(2.0, rel=1e-14)
    assert abs(out.U[:, 0] @ a) == pytest.approx(1.0, rel=1e-14)
    assert abs(out.V[:, 0] @ b) == pytest.approx(1.0, rel=1e-14)
    # pairs flip together
    assert out.U[:, 0] @ a == pytest.approx(out.V[:, 0] @ b, rel=1e-14)


def test_eckart_young():
    z = np.random.default_rng(1).standard_normal((10, 8))
    s = np.linalg.svd(z, compute_uv=False)
    out = classical_svd(z, 4)
    assert np.linalg.norm(z - out.reconstruct()) == pytest.approx(np.sqrt(np.sum(s[4:] ** 2)), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10_000), st.data())
def test_invariants(n, m, seed, data):
    k = data.draw(st.integers(1, min(n, m)))
    z = np.random.default_rng(seed).standard_normal((n, m))
    out = classical_svd(z, k)
    np.testing.assert_allclose(out.U.T @ out.U, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(out.V.T @ out.V, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(z @ out.V, out.U * out.d, atol=1e-8)
    assert np.all(np.diff(out.d) <= 0)
    idx = np.argmax(np.abs(out.U), axis=0)
    assert np.all(out.U[idx, np.arange(k)] > 0)


def test_deterministic():
    z = np.random.default_rng(2).standard_normal((7, 5))
    a, b = classical_svd(z, 3), classical_svd(z, 3)
    np.testing.assert_array_equal(a.U, b.U)
    np.testing.assert_array_equal(a.V, b.V)


def test_sign_convention_pairs():
    u = np.array([[0.1, -0.2], [-0.9, 0.8]])
    v = np.array([[1.0, 1.0], [0.0, 2.0]])
    su, sv = sign_convention(u, v)
    np.testing.assert_array_equal(su, [[-0.1, -0.2], [0.9, 0.8]])
    np.testing.assert_array_equal(sv, [[-1.0, 1.0], [0.0, 2.0]])


@pytest.mark.parametrize("k", [0, 4, 1.5])
def test_bad_rank(k):
    with pytest.raises(InputError):
        classical_svd(np.ones((3, 5)), k)
    with pytest.raises(InputError):
        classical_svd(np.ones(3), 1)


def _fake_chain(u, v, draws=3):
    return SimpleNamespace(U=np.repeat(u[None], draws, axis=0), V=np.repeat(v[None], draws, axis=0), k=u.shape[1])


def test_gap_is_one_for_csvd_chain():
    z = np.random.default_rng(3).standard_normal((6, 5))
    base = classical_svd(z, 2)
    gap = csvd_equivalence_gap(_fake_chain(-base.U, base.V), z)
    np.testing.assert_allclose(gap["U"], 1.0, rtol=1e-14)
    np.testing.assert_allclose(gap["V"], 1.0, rtol=1e-14)


def test_gap_is_zero_for_orthogonal_chain():
    z = np.diag([5.0, 1.0, 0.5])
    swapped = np.eye(3)[:, [2]]
    gap = csvd_equivalence_gap(_fake_chain(swapped, swapped), z)
    assert gap["U"][0] == pytest.approx(0.0, abs=1e-15)


def test_cosine_zero_columns():
    np.testing.assert_array_equal(cosine_similarity(np.zeros((3, 1)), np.ones((3, 1))), [0.0])
