import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamspline.spline import (
    SplineEstimate,
    basis_vector,
    continuity_matrix,
    continuity_vector,
    enforce_continuity,
    roughness_matrix,
    roughness_numeric,
    roughness_quadratic,
    section_eval,
)


def random_spline(rng, rho, n_series=2, T=None, continuous=True):
    T = T or int(rng.integers(1, 11))
    knots = np.concatenate([[0.0], np.cumsum(rng.uniform(0.2, 2.0, T))])
    sections = np.empty((T, n_series, 2 * rho))
    e = rng.normal(size=(n_series, rho))
    for t in range(T):
        tail = rng.normal(size=(n_series, rho))
        a = enforce_continuity(tail, e) if continuous else rng.normal(size=(n_series, 2 * rho))
        sections[t] = a
        e = continuity_vector(a, knots[t + 1] - knots[t], rho)
    return SplineEstimate(knots, sections, rho)


# -- basis and evaluation ---------------------------------------------------

def test_basis_vector_examples():
    np.testing.assert_array_equal(basis_vector(1.5, 1.0, 2), [1, 0.5, 0.25, 0.125])
    np.testing.assert_array_equal(basis_vector(3.0, 3.0, 2), [1, 0, 0, 0])
    np.testing.assert_array_equal(basis_vector(2.0, 0.0, 1), [1, 2])


def test_section_eval_examples():
    a = [1, 2, 3, 4]
    assert section_eval(a, 1.0, 0.0, 0) == 10
    assert section_eval(a, 1.0, 0.0, 1) == 20
    assert section_eval([0, 0, 0, 1], 1.0, 0.0, 2) == 6


def test_section_eval_rejects_bad_order():
    with pytest.raises(ValueError):
        section_eval([1, 2, 3, 4], 1.0, 0.0, 4)
    with pytest.raises(ValueError):
        section_eval([1, 2, 3, 4], 1.0, 0.0, -1)


def test_section_eval_matches_numpy_polynomial():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.normal(size=6)
        x_prev = rng.uniform(0, 100)
        x = x_prev + rng.uniform(0, 3)
        poly = np.polynomial.Polynomial(a)
        for k in range(6):
            assert section_eval(a, x, x_prev, k) == pytest.approx(poly.deriv(k)(x - x_prev), rel=1e-12, abs=1e-12)


# -- continuity --------------------------------------------------------------

def test_continuity_vector_examples():
    np.testing.assert_allclose(continuity_vector([1, 2, 3, 4], 1.0, 2), [10, 20])
    np.testing.assert_allclose(continuity_vector([2.5, 0, 0, 0], 3.7, 2), [2.5, 0])
    np.testing.assert_allclose(continuity_vector([0, 1, 0, 0], 2.0, 2), [2, 1])


def test_continuity_vector_rejects_nonpositive_width():
    with pytest.raises(ValueError):
        continuity_vector([1, 2, 3, 4], 0.0, 2)
    with pytest.raises(ValueError):
        continuity_matrix(-1.0, 2)


@settings(max_examples=200, deadline=None)
@given(rho=st.integers(1, 4), u=st.floats(0.01, 5.0), seed=st.integers(0, 2**32 - 1))
def test_continuity_vector_is_scaled_endpoint_derivatives(rho, u, seed):
    # entry d is the d-th derivative at the right end divided by d!
    a = np.random.default_rng(seed).normal(size=2 * rho)
    e = continuity_vector(a, u, rho)
    for d in range(rho):
        assert e[d] * math.factorial(d) == pytest.approx(section_eval(a, u, 0.0, d), rel=1e-10, abs=1e-10)


def test_enforce_continuity_examples():
    np.testing.assert_array_equal(enforce_continuity([0, 0], [5, -1], rho=2), [5, -1, 0, 0])
    np.testing.assert_array_equal(enforce_continuity([3, 4], [1, 2], rho=2), [1, 2, 3, 4])
    np.testing.assert_array_equal(enforce_continuity([3, 4, 7, 8], [1, 2, 5, 6], rho=2), [1, 2, 3, 4, 5, 6, 7, 8])
    np.testing.assert_array_equal(enforce_continuity(np.array([[3, 4]]), np.array([[1, 2]])), [[1, 2, 3, 4]])


def test_enforce_continuity_shape_mismatch():
    with pytest.raises(ValueError):
        enforce_continuity([1, 2, 3], [1, 2])


@settings(max_examples=100, deadline=None)
@given(rho=st.integers(1, 4), seed=st.integers(0, 2**32 - 1))
def test_enforced_joins_are_smooth(rho, seed):
    s = random_spline(np.random.default_rng(seed), rho)
    scale = max(1.0, float(np.max(np.abs(s.sections))))
    assert s.continuity_defect() < 1e-9 * scale


# -- roughness ---------------------------------------------------------------

def test_roughness_matrix_examples():
    M = roughness_matrix(1.0, 2)
    np.testing.assert_allclose(M[2:, 2:], [[4, 6], [6, 12]])
    assert not M[:2].any() and not M[:, :2].any()
    np.testing.assert_allclose(roughness_matrix(2.0, 2)[2:, 2:], [[8, 24], [24, 96]])
    np.testing.assert_allclose(roughness_matrix(1.0, 1), [[0, 0], [0, 1]])


@settings(max_examples=200, deadline=None)
@given(rho=st.integers(1, 4), u=st.floats(1e-3, 10.0))
def test_roughness_matrix_symmetric_psd(rho, u):
    M = roughness_matrix(u, rho)
    np.testing.assert_array_equal(M, M.T)
    eig = np.linalg.eigvalsh(M)
    assert eig.min() >= -1e-12 * max(1.0, eig.max())
    assert np.linalg.eigvalsh(M[rho:, rho:]).min() > 0


def test_roughness_quadratic_examples():
    one = SplineEstimate([0.0, 1.0], [[[0, 0, 0, 1]]], 2)
    assert roughness_quadratic(one) == pytest.approx(12)
    flat = SplineEstimate([0.0, 1.0, 3.0], [[[1, 2, 0, 0]], [[3, 2, 0, 0]]], 2)
    assert roughness_quadratic(flat) == 0
    two = SplineEstimate([0.0, 1.0, 2.0], [[[0, 0, 0, 1]], [[1, 3, 0, 1]]], 2)
    assert roughness_quadratic(two) == pytest.approx(24)


def test_roughness_numeric_examples():
    one = SplineEstimate([0.0, 1.0], [[[0, 0, 0, 1]]], 2)
    assert roughness_numeric(one, 128) == pytest.approx(12, abs=1e-6)
    zero = SplineEstimate([0.0, 1.0, 2.0], np.zeros((2, 3, 4)), 2)
    assert roughness_numeric(zero) == 0
    with pytest.raises(ValueError):
        roughness_numeric(one, 4)


@settings(max_examples=100, deadline=None)
@given(rho=st.integers(1, 3), seed=st.integers(0, 2**32 - 1), continuous=st.booleans())
def test_roughness_quadratic_matches_quadrature(rho, seed, continuous):
    s = random_spline(np.random.default_rng(seed), rho, continuous=continuous)
    q, n = roughness_quadratic(s), roughness_numeric(s, 32)
    assert q == pytest.approx(n, rel=1e-6, abs=1e-12)


# -- SplineEstimate ----------------------------------------------------------

def test_evaluation_uses_half_open_sections():
    s = SplineEstimate([0.0, 1.0, 2.0], [[[1, 0]], [[5, 0]]], 1)
    assert s(1.0)[0] == 1  # right end belongs to the left section
    assert s(1.0 + 1e-12)[0] == 5
    assert s(0.0)[0] == 1  # closed at the origin by convention
    with pytest.raises(ValueError):
        s(2.5)


def test_spline_validation():
    with pytest.raises(ValueError):
        SplineEstimate([0.0, 1.0, 1.0], np.zeros((2, 1, 4)), 2)
    with pytest.raises(ValueError):
        SplineEstimate([0.0, 1.0], np.zeros((2, 1, 4)), 2)
    with pytest.raises(ValueError):
        SplineEstimate([0.0, 1.0], np.zeros((1, 1, 3)), 2)


def test_spline_arrays_are_read_only():
    s = random_spline(np.random.default_rng(1), 2)
    with pytest.raises(ValueError):
        s.sections[0, 0, 0] = 1.0


def test_limits_and_derivatives_agree():
    s = random_spline(np.random.default_rng(2), 2, T=5)
    for k in range(2):
        np.testing.assert_allclose(s.left_limits(k)[:-1], s.right_limits(k)[1:], atol=1e-9)


def test_transform_is_affine():
    s = random_spline(np.random.default_rng(3), 2, T=4)
    xs = np.linspace(0, s.knots[-1], 17)
    t = s.transform([2.0, 0.5], [1.0, -3.0])
    np.testing.assert_allclose(t(xs), s(xs) * [2.0, 0.5] + [1.0, -3.0], rtol=1e-12, atol=1e-12)


def test_json_round_trip_is_exact():
    s = random_spline(np.random.default_rng(4), 3, T=6)
    text = s.to_json()
    back = SplineEstimate.from_json(text)
    np.testing.assert_array_equal(back.sections, s.sections)
    np.testing.assert_array_equal(back.knots, s.knots)
    assert back.to_json() == text
    d = s.to_dict()
    assert set(d) == {"rho", "n_series", "knots", "sections"}
    assert len(d["sections"][0]) == 2 * 2 * 3
