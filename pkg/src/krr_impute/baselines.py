"""Comparator imputation models: OLS and additive cubic B-spline regression,
both fitted by least squares on the responders."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import InvalidInput, RankDeficient, RankDeficientWarning
from .kernels import InputScaler
from .krr import LabeledSample, impute_estimate

DEGREE = 3
DEFAULT_KNOTS = 3
_FALLBACK_RIDGE = 1e-8


@dataclass(frozen=True, eq=False)
class LinearModel:
    intercept: float
    slopes: np.ndarray

    def predict(self, X) -> np.ndarray:
        X = _points(X)
        if X.shape[1] != self.slopes.size:
            raise InvalidInput("dimension mismatch")
        return self.intercept + X @ self.slopes


def _points(X):
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def fit_linear(sample: LabeledSample) -> LinearModel:
    r = sample.responders
    if sample.n1 < sample.d + 1:
        raise RankDeficient(f"need at least {sample.d + 1} responders, have {sample.n1}")
    A = np.column_stack([np.ones(sample.n1), sample.X[r]])
    coef, _, rank, _ = np.linalg.lstsq(A, sample.y[r], rcond=None)
    if rank < A.shape[1]:
        raise RankDeficient("responder design matrix is rank deficient")
    return LinearModel(intercept=float(coef[0]), slopes=coef[1:])


def knot_vector(knots: int) -> np.ndarray:
    """Clamped cubic knot vector on [0, 1] with ``knots`` equispaced interior knots."""
    if knots < 0:
        raise InvalidInput("knot count must be non-negative")
    interior = np.linspace(0.0, 1.0, knots + 2)[1:-1]
    return np.concatenate([np.zeros(DEGREE + 1), interior, np.ones(DEGREE + 1)])


def bspline_basis(z, knots: int) -> np.ndarray:
    """Full cubic B-spline basis (rows sum to one) at points ``z`` in [0, 1]."""
    z = np.clip(np.asarray(z, dtype=float).ravel(), 0.0, 1.0)
    return BSpline.design_matrix(z, knot_vector(knots), DEGREE).toarray()


@dataclass(frozen=True, eq=False)
class BSplineModel:
    scaler: InputScaler
    knots: int
    coefficients: np.ndarray

    def design(self, X) -> np.ndarray:
        return _additive_design(self.scaler.transform(X), self.knots)

    def predict(self, X) -> np.ndarray:
        return self.design(X) @ self.coefficients


def _additive_design(Z, knots):
    # the first basis function of every coordinate is dropped so the
    # global intercept is identifiable (each block sums to one)
    blocks = [np.ones((Z.shape[0], 1))]
    for j in range(Z.shape[1]):
        blocks.append(bspline_basis(Z[:, j], knots)[:, 1:])
    return np.hstack(blocks)


def fit_bspline(sample: LabeledSample, knots: int = DEFAULT_KNOTS) -> BSplineModel:
    scaler = InputScaler.fit(sample.X)
    r = sample.responders
    B = _additive_design(scaler.transform(sample.X[r]), knots)
    if sample.n1 < B.shape[1]:
        raise RankDeficient(f"need at least {B.shape[1]} responders, have {sample.n1}")
    y = sample.y[r]
    coef, _, rank, _ = np.linalg.lstsq(B, y, rcond=None)
    if rank < B.shape[1]:
        warnings.warn("B-spline design is rank deficient; refitting with a small ridge",
                      RankDeficientWarning, stacklevel=2)
        G = B.T @ B
        coef = np.linalg.solve(G + _FALLBACK_RIDGE * np.trace(G) / G.shape[0] * np.eye(G.shape[0]), B.T @ y)
    return BSplineModel(scaler=scaler, knots=knots, coefficients=coef)


def impute_with(model, sample: LabeledSample) -> float:
    """Imputation mean with a fitted baseline model."""
    return impute_estimate(sample, model)


def out_of_range_count(predictions, lower=0.0, upper=1.0) -> int:
    """Number of predictions outside ``[lower, upper]`` (binary-response diagnostic)."""
    p = np.asarray(predictions)
    return int(np.sum((p < lower) | (p > upper)))
