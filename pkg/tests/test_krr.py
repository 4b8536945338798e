import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krr_impute import krr, simulation
from krr_impute.errors import InvalidInput, NoResponders
from krr_impute.kernels import InputScaler, KernelSpec, gram
from krr_impute.krr import PAPER_LINEAR_TRACE, SQUARED_TRACE, LabeledSample

SPEC = KernelSpec("sobolev", 2)


def make_sample(n, d=2, seed=0, rate=0.7):
    rng = np.random.default_rng(seed)
    X = rng.uniform(1, 3, size=(n, d))
    y = np.sin(2 * X[:, 0]) + X[:, -1] ** 2 + 0.1 * rng.standard_normal(n)
    delta = (rng.uniform(size=n) < rate).astype(int)
    delta[0] = 1
    return LabeledSample(X, np.where(delta == 1, y, np.nan), delta)


def full_system_predictions(sample, lam, spec=SPEC):
    K = gram(spec, InputScaler.fit(sample.X), sample.X)
    D = np.diag(sample.delta.astype(float))
    y0 = np.where(sample.responders, sample.y, 0.0)
    alpha = np.linalg.inv(D @ K + lam * np.eye(sample.n)) @ D @ y0
    return K @ alpha


def dense_gcv(sample, lam, variant, spec=SPEC):
    K = gram(spec, InputScaler.fit(sample.X), sample.X)
    D = np.diag(sample.delta.astype(float))
    y0 = np.where(sample.responders, sample.y, 0.0)
    A = D @ K @ np.linalg.inv(D @ K + lam * np.eye(sample.n)) @ D
    resid = D @ y0 - A @ y0
    num = resid @ resid / sample.n
    tr = np.trace(D - A) / sample.n
    return num / tr if variant == PAPER_LINEAR_TRACE else num / tr**2


def test_sample_validation():
    with pytest.raises(InvalidInput):
        LabeledSample(np.ones((1, 1)), np.ones(1), np.ones(1, dtype=int))
    with pytest.raises(NoResponders):
        LabeledSample(np.ones((3, 1)), np.ones(3), np.zeros(3, dtype=int))
    with pytest.raises(InvalidInput):
        LabeledSample(np.ones((3, 1)), np.array([1.0, np.nan, 2.0]), np.ones(3, dtype=int))


def test_interpolation_limit():
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(15, 1))
    y = np.cos(4 * X[:, 0])
    s = LabeledSample(X, y, np.ones(15, dtype=int))
    model = krr.fit(s, SPEC, 1e-10)
    np.testing.assert_allclose(model.predict(X), y, atol=1e-4)


def test_shrinkage_to_zero():
    s = make_sample(30)
    model = krr.fit(s, SPEC, 1e12)
    assert np.max(np.abs(model.coefficients)) < 1e-6
    assert np.max(np.abs(model.predict(s.X))) < 1e-4


def test_tiny_instance_vs_full_system():
    X = np.array([[0.1], [0.6], [0.9]])
    s = LabeledSample(X, np.array([1.0, np.nan, -0.5]), np.array([1, 0, 1]))
    model = krr.fit(s, SPEC, 0.3)
    assert model.coefficients.size == 2
    np.testing.assert_allclose(model.predict(X), full_system_predictions(s, 0.3), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(3, 30), seed=st.integers(0, 2**31), lam=st.floats(1e-4, 1e2))
def test_submatrix_matches_full_system(n, seed, lam):
    s = make_sample(n, seed=seed)
    np.testing.assert_allclose(krr.fit(s, SPEC, lam).predict(s.X), full_system_predictions(s, lam), atol=1e-9)


def test_prediction_linear_in_coefficients():
    s = make_sample(20)
    m = krr.fit(s, SPEC, 0.1)
    doubled = krr.KrrModel(m.spec, m.scaler, m.support_points, 2 * m.coefficients, m.lam)
    zero = krr.KrrModel(m.spec, m.scaler, m.support_points, np.zeros_like(m.coefficients), m.lam)
    np.testing.assert_allclose(doubled.predict(s.X), 2 * m.predict(s.X), rtol=1e-14)
    assert np.all(zero.predict(s.X) == 0)


def test_monotone_shrinkage():
    s = make_sample(40)
    system = krr._ResponderSystem(s, SPEC)
    norms = []
    for lam in np.geomspace(1e-6, 1e4, 25):
        a = system.fit(lam).coefficients
        norms.append(float(a @ system.K_rr @ a))
    assert np.all(np.diff(norms) <= 1e-10)


@pytest.mark.parametrize("variant", [PAPER_LINEAR_TRACE, SQUARED_TRACE])
def test_gcv_tiny_dense_oracle(variant):
    X = np.array([[0.1], [0.6], [0.9]])
    s = LabeledSample(X, np.array([1.0, np.nan, -0.5]), np.array([1, 0, 1]))
    for lam in (1e-3, 0.1, 5.0):
        dense = dense_gcv(s, lam, variant)
        assert krr.gcv_score(s, SPEC, lam, variant) == pytest.approx(dense, rel=1e-10, abs=1e-10)


@pytest.mark.parametrize("variant", [PAPER_LINEAR_TRACE, SQUARED_TRACE])
def test_gcv_dense_oracle_random(variant):
    s = make_sample(25, seed=4)
    for lam in (1e-4, 0.05, 3.0):
        assert krr.gcv_score(s, SPEC, lam, variant) == pytest.approx(dense_gcv(s, lam, variant), rel=1e-9)


def test_gcv_large_lambda_limit():
    s = make_sample(20, seed=5)
    y0 = np.where(s.responders, s.y, 0.0)
    num = np.sum(y0**2) / s.n
    # the trace term tends to n1/n
    assert krr.gcv_score(s, SPEC, 1e14, PAPER_LINEAR_TRACE) == pytest.approx(num / (s.n1 / s.n), rel=1e-8)


def test_gcv_finite_over_wide_range():
    s = make_sample(30, seed=6)
    vals = [krr.gcv_score(s, SPEC, lam, SQUARED_TRACE) for lam in np.geomspace(1e-8, 1e8, 33)]
    assert np.all(np.isfinite(vals))


def test_default_grid_contains_anchor():
    for n, order in ((200, 2), (500, 3), (37, 1)):
        grid = krr.default_lambda_grid(n, order)
        assert np.any(grid == float(n) ** (1 - order))
        assert np.all(grid > 0)


def test_selection_singleton_and_argmin():
    s = make_sample(30)
    lam, scores = krr.select_lambda(s, SPEC, grid=[0.7])
    assert lam == 0.7 and scores.size == 1
    grid = np.geomspace(1e-4, 10, 12)
    lam, scores = krr.select_lambda(s, SPEC, grid=grid, variant=SQUARED_TRACE)
    assert scores[grid == lam][0] == scores.min()


def test_model_a_selection_matches_dense_oracle():
    cfg = simulation.SimConfig(model="A", n=200, replications=1, seed=7)
    s = simulation.generate(cfg, 0).sample
    grid = krr.default_lambda_grid(s.n, 2, num=12)
    for variant in (PAPER_LINEAR_TRACE, SQUARED_TRACE):
        lam, _ = krr.select_lambda(s, SPEC, grid=grid, variant=variant)
        dense = np.array([dense_gcv(s, g, variant) for g in grid])
        assert lam == grid[np.argmin(dense)]


def test_impute_hand_case():
    class Fixed:
        def predict(self, X):
            # called on the two missing rows only
            return np.array([3.0, 5.0])

    s = LabeledSample(np.arange(4.0)[:, None], np.array([1.0, 2.0, np.nan, np.nan]), np.array([1, 1, 0, 0]))
    assert krr.impute_estimate(s, Fixed()) == pytest.approx(2.75)


def test_impute_full_response_and_constant():
    s = make_sample(20, rate=1.1)
    m = krr.fit(s, SPEC, 0.1)
    assert krr.impute_estimate(s, m) == pytest.approx(np.mean(s.y))

    class Const:
        def predict(self, X):
            return np.full(len(X), 4.5)

    X = np.arange(5.0)[:, None]
    # a single responder carrying the same value as the predictions
    s2 = LabeledSample(X, np.array([4.5, np.nan, np.nan, np.nan, np.nan]), np.array([1, 0, 0, 0, 0]))
    assert krr.impute_estimate(s2, Const()) == pytest.approx(4.5)


def test_fit_gcv_returns_selected_model():
    s = make_sample(40)
    model, sel = krr.fit_gcv(s, SPEC, variant=SQUARED_TRACE)
    assert model.lam == sel.lam
    assert model.coefficients.size == s.n1
