import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gdmnowcast.splines import cubic_basis, cyclic_basis, difference_matrix, evaluate_basis

coefs = arrays(np.float64, 10, elements=st.floats(-5, 5, allow_nan=False))


def test_raw_basis_partition_of_unity():
    x = np.linspace(0, 30, 61)
    b = cubic_basis(x, 10)
    np.testing.assert_allclose((b.X + b.center).sum(axis=1), 1.0, atol=1e-12)
    c = cyclic_basis(x, 7.0, 7)
    np.testing.assert_allclose((c.X + c.center).sum(axis=1), 1.0, atol=1e-12)


def test_penalty_rank():
    b = cubic_basis(np.arange(40.0), 10)
    assert np.linalg.matrix_rank(b.M) == 8
    c = cyclic_basis(np.arange(40.0), 7.0, 7)
    assert np.linalg.matrix_rank(c.M) == 6


@settings(max_examples=50, deadline=None)
@given(coefs)
def test_penalty_equals_squared_second_differences(kappa):
    b = cubic_basis(np.arange(30.0), 10)
    loop = sum((kappa[i + 2] - 2 * kappa[i + 1] + kappa[i]) ** 2 for i in range(8))
    assert kappa @ b.M @ kappa == pytest.approx(loop, rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(coefs, st.floats(-3, 3), st.floats(-3, 3))
def test_penalty_invariance(kappa, c, slope):
    b = cubic_basis(np.arange(30.0), 10)
    base = kappa @ b.M @ kappa
    shifted = kappa + c + slope * np.arange(10)
    assert shifted @ b.M @ shifted == pytest.approx(base, rel=1e-8, abs=1e-7)
    cy = cyclic_basis(np.arange(14.0), 7.0, 7)
    k7 = kappa[:7]
    assert (k7 + c) @ cy.M @ (k7 + c) == pytest.approx(k7 @ cy.M @ k7, rel=1e-8, abs=1e-7)


def test_penalty_psd_and_centring():
    x = np.sort(np.random.default_rng(1).uniform(0, 50, 80))
    for b in (cubic_basis(x, 12), cyclic_basis(x, 7.0, 7), cyclic_basis(x, 365.25, 8, kind="seasonal_cyclic")):
        assert np.all(np.isfinite(b.X))
        np.testing.assert_allclose(b.M, b.M.T)
        assert np.linalg.eigvalsh(b.M).min() >= -1e-10
    np.testing.assert_allclose(cubic_basis(x, 12).X.mean(axis=0), 0.0, atol=1e-10)


def test_cyclic_periodicity():
    x = np.random.default_rng(2).uniform(0, 7, 25)
    b = cyclic_basis(x, 7.0, 7)
    np.testing.assert_allclose(evaluate_basis(b, x + 7.0), evaluate_basis(b, x), atol=1e-12)
    days = cyclic_basis(np.arange(14.0), 7.0, 7)
    np.testing.assert_allclose(days.X[7:], days.X[:7], atol=1e-12)


def test_cyclic_constant_coefficients():
    b = cyclic_basis(np.linspace(0, 7, 30), 7.0, 4)
    f = (b.X + b.center) @ np.full(4, 2.5)
    np.testing.assert_allclose(f, 2.5, atol=1e-12)
    assert np.full(4, 2.5) @ b.M @ np.full(4, 2.5) == pytest.approx(0.0, abs=1e-12)


def test_evaluate_reproduces_training_rows():
    x = np.arange(25.0)
    b = cubic_basis(x, 10)
    np.testing.assert_allclose(evaluate_basis(b, x[[0, 5, 24]]), b.X[[0, 5, 24]], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(coefs)
def test_linear_extrapolation(kappa):
    x = np.arange(30.0)
    b = cubic_basis(x, 10)
    f = evaluate_basis(b, np.array([28.0, 29.0, 30.0, 31.0, 35.0])) @ kappa
    # beyond the last knot the function continues along its boundary tangent
    hi = evaluate_basis(b, np.array([29.0])) @ kappa
    slope = (evaluate_basis(b, np.array([29.0 + 1e-6])) @ kappa - evaluate_basis(b, np.array([29.0 - 1e-6])) @ kappa) / 2e-6
    assert f[2] == pytest.approx(hi[0] + slope[0], abs=1e-4)
    assert f[4] - f[3] == pytest.approx(4 * (f[3] - f[2]), abs=1e-8)


def test_invalid_arguments():
    with pytest.raises(ValueError):
        cubic_basis(np.arange(10.0), 3)
    with pytest.raises(ValueError):
        cubic_basis(np.ones(10), 5)
    with pytest.raises(ValueError):
        cyclic_basis(np.arange(5.0), 7.0, 2)
    with pytest.raises(ValueError):
        cyclic_basis(np.arange(5.0), 0.0, 7)
    with pytest.raises(ValueError):
        cyclic_basis(np.arange(5.0), -7.0, 7)


def test_difference_matrix_shapes():
    assert difference_matrix(6).shape == (4, 6)
    D = difference_matrix(5, cyclic=True)
    assert D.shape == (5, 5)
    np.testing.assert_allclose(D.sum(axis=1), 0.0)
