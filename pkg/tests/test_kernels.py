import math
from fractions import Fraction

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from krr_impute import kernels
from krr_impute.errors import InvalidInput, NotPositiveSemidefinite
from krr_impute.kernels import GAUSSIAN, PAPER_SIGN, SOBOLEV, STANDARD_SIGN, InputScaler, KernelSpec

T = sympy.Symbol("t")


def exact_bernoulli(q, x: Fraction) -> Fraction:
    # independent oracle: sympy's Bernoulli polynomial in rational arithmetic
    val = sympy.Poly(sympy.bernoulli(q, T), T).eval(sympy.Rational(x.numerator, x.denominator))
    return Fraction(int(val.p), int(val.q))


def exact_k(q, x: Fraction) -> Fraction:
    return exact_bernoulli(q, x) / math.factorial(q)


def test_bernoulli_small_cases():
    assert kernels.bernoulli_poly(0, 0.3) == 1.0
    assert kernels.bernoulli_poly(1, 0.5) == 0.0
    assert kernels.bernoulli_poly(2, 0.0) == pytest.approx(1 / 6, abs=1e-15)


def test_bernoulli_matches_exact_rationals():
    grid = [Fraction(i, 100) for i in range(101)]
    x = np.array([float(g) for g in grid])
    for q in range(kernels.MAX_BERNOULLI_ORDER + 1):
        exact = np.array([float(exact_bernoulli(q, g)) for g in grid])
        assert np.max(np.abs(kernels.bernoulli_poly(q, x) - exact)) <= 1e-12


def test_bernoulli_rejects_bad_order():
    with pytest.raises(InvalidInput):
        kernels.bernoulli_poly(9, 0.1)
    with pytest.raises(InvalidInput):
        kernels.bernoulli_poly(-1, 0.1)


def test_sobolev_symmetric():
    assert kernels.sobolev_kernel(2, 0.2, 0.7) == kernels.sobolev_kernel(2, 0.7, 0.2)


def test_sobolev_origin_exact_value():
    zero = Fraction(0)
    expected = exact_k(0, zero) ** 2 + exact_k(1, zero) ** 2 + exact_k(2, zero) ** 2 - exact_k(4, zero)
    assert kernels.sobolev_kernel(2, 0.0, 0.0, STANDARD_SIGN) == pytest.approx(float(expected), abs=1e-15)


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_sobolev_off_diagonal_exact(order):
    x, y = Fraction(1, 5), Fraction(7, 10)
    sign = (-1) ** (order - 1)
    expected = sum(exact_k(q, x) * exact_k(q, y) for q in range(order + 1)) + sign * exact_k(2 * order, abs(x - y))
    assert kernels.sobolev_kernel(order, 0.2, 0.7) == pytest.approx(float(expected), abs=1e-14)


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_validate_psd_prefers_standard(order):
    assert kernels.validate_psd(order) == STANDARD_SIGN


def test_paper_sign_is_not_psd_for_order_two():
    grid = np.linspace(0, 1, 50)
    G = kernels.sobolev_gram_1d(2, grid, grid, PAPER_SIGN)
    with pytest.raises(NotPositiveSemidefinite):
        kernels.check_psd(G)


def test_gram_psd_on_random_points():
    rng = np.random.default_rng(0)
    Z = rng.uniform(size=(20, 1))
    kernels.check_psd(kernels.gram_scaled(KernelSpec(SOBOLEV, 2), Z))


@settings(max_examples=25, deadline=None)
@given(order=st.integers(1, 4), d=st.integers(1, 4), n=st.integers(2, 200), seed=st.integers(0, 2**31))
def test_gram_psd_property(order, d, n, seed):
    Z = np.random.default_rng(seed).uniform(size=(n, d))
    evals = np.linalg.eigvalsh(kernels.gram_scaled(KernelSpec(SOBOLEV, order), Z))
    assert evals[0] >= -kernels.PSD_RTOL * np.max(np.abs(evals))


def test_gaussian_values():
    assert kernels.gaussian_kernel(0.7, [0.3, 0.1], [0.3, 0.1]) == 1.0
    assert kernels.gaussian_kernel(1.0, [0.0], [2.0]) == pytest.approx(math.exp(-2))
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.uniform(size=3), rng.uniform(size=3)
        assert kernels.gaussian_kernel(0.5, a, b) == kernels.gaussian_kernel(0.5, b, a)


def test_gaussian_rejects_bad_input():
    with pytest.raises(InvalidInput):
        kernels.gaussian_kernel(0.0, [0.0], [1.0])
    with pytest.raises(InvalidInput):
        kernels.gaussian_kernel(1.0, [0.0, 1.0], [1.0])


def test_single_point_gram():
    zero = Fraction(1, 4)
    expected = sum(exact_k(q, zero) ** 2 for q in range(3)) - exact_k(4, Fraction(0))
    G = kernels.gram_scaled(KernelSpec(SOBOLEV, 2), np.array([[0.25]]))
    assert G.shape == (1, 1)
    assert G[0, 0] > 0
    assert G[0, 0] == pytest.approx(float(expected), abs=1e-15)


@pytest.mark.parametrize("spec", [KernelSpec(SOBOLEV, 3), KernelSpec(GAUSSIAN, bandwidth=0.4)])
def test_gram_transpose(spec):
    rng = np.random.default_rng(2)
    A, B = rng.uniform(size=(7, 2)), rng.uniform(size=(5, 2))
    np.testing.assert_array_equal(kernels.gram_scaled(spec, A, B), kernels.gram_scaled(spec, B, A).T)


def test_product_rule():
    rng = np.random.default_rng(3)
    A, B = rng.uniform(size=(4, 2)), rng.uniform(size=(6, 2))
    spec = KernelSpec(SOBOLEV, 2)
    expected = kernels.gram_scaled(spec, A[:, :1], B[:, :1]) * kernels.gram_scaled(spec, A[:, 1:], B[:, 1:])
    np.testing.assert_allclose(kernels.gram_scaled(spec, A, B), expected, rtol=0, atol=1e-15)


def test_sobolev_domain_enforced():
    with pytest.raises(InvalidInput):
        kernels.sobolev_gram_1d(2, [1.5], [0.2], STANDARD_SIGN)


def test_kernel_spec_validation():
    with pytest.raises(InvalidInput):
        KernelSpec("laplace")
    with pytest.raises(InvalidInput):
        KernelSpec(SOBOLEV, order=0)
    with pytest.raises(InvalidInput):
        KernelSpec(GAUSSIAN, bandwidth=-1.0)
    assert KernelSpec(SOBOLEV, 2).active_sign == STANDARD_SIGN
    assert KernelSpec(SOBOLEV, 2, sign=PAPER_SIGN).active_sign == PAPER_SIGN


def test_median_bandwidth_resolution():
    Z = np.array([[0.0], [0.5], [1.0]])
    spec = KernelSpec(GAUSSIAN).resolve(Z)
    assert spec.bandwidth == pytest.approx(0.5)


def test_scaler_maps_to_unit_cube_and_clamps():
    X = np.array([[1.0, 5.0, 2.0], [3.0, 7.0, 2.0], [2.0, 6.0, 2.0]])
    sc = InputScaler.fit(X)
    Z = sc.transform(X)
    np.testing.assert_allclose(Z[:, 0], [0.0, 1.0, 0.5])
    np.testing.assert_allclose(Z[:, 2], 0.5)
    out = sc.transform(np.array([[10.0, -3.0, 9.0]]))
    np.testing.assert_allclose(out, [[1.0, 0.0, 0.5]])


@settings(max_examples=30, deadline=None)
@given(
    X=arrays(np.float64, (12, 2), elements=st.floats(-50, 50)),
    scale=st.floats(0.1, 100),
    shift=st.floats(-100, 100),
)
def test_gram_affine_invariance(X, scale, shift):
    if np.any(np.ptp(X, axis=0) < 1e-3):
        return
    spec = KernelSpec(SOBOLEV, 2)
    G1 = kernels.gram(spec, InputScaler.fit(X), X)
    Y = scale * X + shift
    G2 = kernels.gram(spec, InputScaler.fit(Y), Y)
    np.testing.assert_allclose(G1, G2, atol=1e-9)
