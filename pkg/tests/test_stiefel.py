import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from structsvd.errors import InputError, NumericalError
from structsvd.kernels import CoordinateSet, KernelSpec, correlation_matrix
from structsvd.stiefel import (
    BasisMatrix,
    generate_structured_orthonormal,
    null_space_basis,
    orthonormality_error,
    project_column,
    projected_normal_logdensity,
)


def test_square_orthogonal():
    w = generate_structured_orthonormal(3, 3, None, np.random.default_rng(0)).columns
    np.testing.assert_allclose(w.T @ w, np.eye(3), atol=1e-14)


def test_variable_length_scales_valid():
    coords = CoordinateSet.grid(-5, 5, 50)
    kerns = [KernelSpec.matern(r, 3.5) for r in (3.5, 1.0, 0.5, 0.25)]
    omegas = [correlation_matrix(kk, coords) for kk in kerns]
    b = generate_structured_orthonormal(50, 4, omegas, np.random.default_rng(1), coords, kerns)
    assert b.shape == (50, 4)
    assert orthonormality_error(b.columns) < 1e-12


def test_generator_rejects_bad_inputs():
    rng = np.random.default_rng(0)
    with pytest.raises(InputError):
        generate_structured_orthonormal(3, 4, None, rng)
    with pytest.raises(InputError):
        generate_structured_orthonormal(3, 1, [-np.eye(3)], rng)
    with pytest.raises(InputError):
        generate_structured_orthonormal(3, 1, [np.eye(2)], rng)
    with pytest.raises(InputError):
        generate_structured_orthonormal(2, 1, [np.array([[1.0, 0.5], [0.0, 1.0]])], rng)


def test_basis_matrix_validation():
    with pytest.raises(InputError):
        BasisMatrix(np.ones((3, 2)))
    with pytest.raises(InputError):
        BasisMatrix(np.eye(3)[:, :2], coords=CoordinateSet([0.0, 1.0]))


def test_null_space_of_e1():
    e1 = np.array([[1.0], [0.0], [0.0]])
    nb = null_space_basis(e1)
    assert nb.shape == (3, 2)
    np.testing.assert_allclose(nb.T @ nb, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(nb.T @ e1, 0.0, atol=1e-15)


def test_null_space_empty_is_identity():
    np.testing.assert_array_equal(null_space_basis(np.empty((4, 0)), 4), np.eye(4))


def test_null_space_random_and_rank_deficient():
    q, _ = np.linalg.qr(np.random.default_rng(3).standard_normal((20, 3)))
    nb = null_space_basis(q)
    assert nb.shape == (20, 17)
    np.testing.assert_allclose(nb.T @ nb, np.eye(17), atol=1e-13)
    np.testing.assert_allclose(q.T @ nb, 0.0, atol=1e-13)
    with pytest.raises(NumericalError):
        null_space_basis(np.column_stack([q[:, 0], q[:, 0]]))


def test_project_column_reconstructs():
    w = generate_structured_orthonormal(7, 3, None, np.random.default_rng(5)).columns
    for i in range(3):
        pc = project_column(w, i)
        np.testing.assert_allclose(pc.column, w[:, i], atol=1e-14)
        assert abs(np.linalg.norm(pc.w_tilde) - 1) < 1e-14
        assert pc.w_tilde.shape == (5,)


def test_projected_normal_closed_forms():
    assert projected_normal_logdensity(1.0, [1.0], [[1.0]]) == pytest.approx(-1.418939, abs=5e-7)
    val = projected_normal_logdensity(2.0, [1.0, 0.0], np.eye(2))
    assert val == pytest.approx(-math.log(2 * math.pi) - 2 + math.log(2), abs=1e-14)
    assert val == pytest.approx(-3.144729, abs=1e-6)


def test_projected_normal_matches_dense_density():
    rng = np.random.default_rng(11)
    a = rng.standard_normal((5, 5))
    omega = a @ a.T + 5 * np.eye(5)
    w = rng.standard_normal(5)
    w /= np.linalg.norm(w)
    r = 1.7
    ref = stats.multivariate_normal(np.zeros(5), omega).logpdf(r * w) + 4 * math.log(r)
    assert projected_normal_logdensity(r, w, omega) == pytest.approx(ref, rel=1e-12)


def test_projected_normal_errors():
    with pytest.raises(InputError):
        projected_normal_logdensity(0.0, [1.0], [[1.0]])
    with pytest.raises(InputError):
        projected_normal_logdensity(1.0, [0.6, 0.6], np.eye(2))
    with pytest.raises(NumericalError):
        projected_normal_logdensity(1.0, [1.0, 0.0], np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_columns_exchangeable_under_identity():
    # with Omega = I every column is marginally uniform on the sphere
    rng = np.random.default_rng(21)
    draws = np.array([generate_structured_orthonormal(6, 3, None, rng).columns[:, 0] for _ in range(3000)])
    last = np.array([generate_structured_orthonormal(6, 3, None, rng).columns[:, 2] for _ in range(3000)])
    assert stats.ks_2samp(draws[:, 0], last[:, 0]).pvalue > 1e-3


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 30), data=st.data(), seed=st.integers(0, 2**32 - 1))
def test_orthonormal_property(n, data, seed):
    k = data.draw(st.integers(1, n))
    rho = data.draw(st.floats(0.1, 5.0))
    coords = CoordinateSet.grid(0, 10, n)
    omegas = [correlation_matrix(KernelSpec.matern(rho, 2.5), coords)] * k
    w = generate_structured_orthonormal(n, k, omegas, np.random.default_rng(seed)).columns
    assert orthonormality_error(w) < 1e-8
