"""Kernel ridge regression on responders, GCV tuning and the imputation mean."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTrace, InvalidInput, NoResponders
from .kernels import InputScaler, KernelSpec, check_psd, gram_scaled
from .numerics import solve_spd

PAPER_LINEAR_TRACE = "paper"
SQUARED_TRACE = "squared"
GCV_VARIANTS = (PAPER_LINEAR_TRACE, SQUARED_TRACE)


@dataclass(frozen=True, eq=False)
class LabeledSample:
    """Covariates ``X`` (n x d), responses ``y`` and response indicators ``delta``.

    Entries of ``y`` where ``delta == 0`` are ignored and may be NaN.
    """

    X: np.ndarray
    y: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        delta = np.asarray(self.delta).ravel()
        if X.ndim != 2 or X.shape[1] < 1:
            raise InvalidInput("X must be an n x d array with d >= 1")
        n = X.shape[0]
        if n < 2:
            raise InvalidInput("need at least two units")
        if y.shape[0] != n or delta.shape[0] != n:
            raise InvalidInput("X, y and delta must have the same number of rows")
        if not np.all(np.isin(delta, (0, 1))):
            raise InvalidInput("delta must be 0/1")
        delta = delta.astype(np.int8)
        if not np.all(np.isfinite(X)):
            raise InvalidInput("covariates must be finite")
        if delta.sum() == 0:
            raise NoResponders("no unit has an observed response")
        if not np.all(np.isfinite(y[delta == 1])):
            raise InvalidInput("observed responses must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "delta", delta)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def responders(self) -> np.ndarray:
        return self.delta == 1

    @property
    def n1(self) -> int:
        return int(self.delta.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    def subset(self, idx) -> "LabeledSample":
        return LabeledSample(self.X[idx], self.y[idx], self.delta[idx])


@dataclass(frozen=True, eq=False)
class KrrModel:
    spec: KernelSpec
    scaler: InputScaler
    support_points: np.ndarray  # responder covariates, scaled to [0, 1]^d
    coefficients: np.ndarray
    lam: float

    def predict(self, X_new) -> np.ndarray:
        return predict(self, X_new)


class _ResponderSystem:
    """Scaled responder Gram matrix with a lazily computed eigendecomposition.

    Shared by GCV (one eigendecomposition serves the whole grid) and the
    final coefficient solve.
    """

    def __init__(self, sample: LabeledSample, spec: KernelSpec):
        self.sample = sample
        self.scaler = InputScaler.fit(sample.X)
        self.Z = self.scaler.transform(sample.X)
        r = sample.responders
        self.spec = spec.resolve(self.Z[r])
        self.Z_r = self.Z[r]
        self.y_r = sample.y[r]
        self.K_rr = gram_scaled(self.spec, self.Z_r)
        self._eig = None

    def eigen(self):
        if self._eig is None:
            evals, evecs = np.linalg.eigh(self.K_rr)
            check_psd(self.K_rr, evals)
            self._eig = (np.clip(evals, 0.0, None), evecs, evecs.T @ self.y_r)
        return self._eig

    def gcv(self, lam: float, variant: str) -> float:
        if variant not in GCV_VARIANTS:
            raise InvalidInput(f"unknown GCV variant {variant!r}")
        if not lam > 0:
            raise InvalidInput("lambda must be positive")
        evals, _, c = self.eigen()
        shrink = lam / (evals + lam)
        n = self.sample.n
        numerator = float(np.sum((shrink * c) ** 2)) / n
        trace = float(np.sum(shrink)) / n
        if not trace > 1e-14:
            raise DegenerateTrace(f"trace(Delta - A) underflows at lambda={lam:g}")
        return numerator / trace if variant == PAPER_LINEAR_TRACE else numerator / trace**2

    def fit(self, lam: float) -> KrrModel:
        if not lam > 0:
            raise InvalidInput("lambda must be positive")
        alpha = solve_spd(self.K_rr, self.y_r, ridge=lam).solution
        return KrrModel(spec=self.spec, scaler=self.scaler, support_points=self.Z_r,
                        coefficients=alpha, lam=float(lam))


def fit(sample: LabeledSample, spec: KernelSpec, lam: float) -> KrrModel:
    """Solve ``(K_rr + lam I) alpha = y_r`` over the responders."""
    return _ResponderSystem(sample, spec).fit(lam)


def predict(model: KrrModel, X_new) -> np.ndarray:
    Z = model.scaler.transform(X_new)
    if Z.shape[1] != model.support_points.shape[1]:
        raise InvalidInput("dimension mismatch with training covariates")
    return gram_scaled(model.spec, Z, model.support_points) @ model.coefficients


def gcv_score(sample: LabeledSample, spec: KernelSpec, lam: float,
              variant: str = PAPER_LINEAR_TRACE) -> float:
    """GCV criterion with hat matrix ``A = Delta K (Delta K + lam I)^{-1} Delta``.

    ``variant="paper"`` divides by ``n^{-1} tr(Delta - A)``; ``"squared"``
    divides by its square.
    """
    return _ResponderSystem(sample, spec).gcv(lam, variant)


def default_lambda_grid(n: int, order: int = 2, num: int = 30) -> np.ndarray:
    """Log grid on ``[1e-6 n^{2-l}, 1e2 n]`` plus the rate anchor ``n^{1-l}``."""
    anchor = float(n) ** (1 - order)
    grid = np.geomspace(1e-6 * anchor * n, 1e2 * n, num)
    return np.unique(np.append(grid, anchor))


@dataclass(frozen=True)
class LambdaSelection:
    lam: float
    grid: np.ndarray = field(repr=False)
    scores: np.ndarray = field(repr=False)


def _select(system: _ResponderSystem, grid, variant) -> LambdaSelection:
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise InvalidInput("lambda grid is empty")
    scores = np.empty(grid.size)
    for i, lam in enumerate(grid):
        try:
            scores[i] = system.gcv(lam, variant)
        except DegenerateTrace:
            scores[i] = np.inf
    finite = np.isfinite(scores)
    if not finite.any():
        raise DegenerateTrace("no finite GCV score on the lambda grid")
    best = np.min(scores[finite])
    # ties go to the smaller lambda
    lam = float(np.min(grid[scores == best]))
    return LambdaSelection(lam=lam, grid=grid, scores=scores)


def select_lambda(sample: LabeledSample, spec: KernelSpec, grid=None,
                  variant: str = PAPER_LINEAR_TRACE) -> tuple[float, np.ndarray]:
    if grid is None:
        grid = default_lambda_grid(sample.n, spec.order)
    sel = _select(_ResponderSystem(sample, spec), grid, variant)
    return sel.lam, sel.scores


def fit_gcv(sample: LabeledSample, spec: KernelSpec, grid=None,
            variant: str = PAPER_LINEAR_TRACE) -> tuple[KrrModel, LambdaSelection]:
    """Select lambda by GCV and refit, sharing one Gram matrix."""
    system = _ResponderSystem(sample, spec)
    if grid is None:
        grid = default_lambda_grid(sample.n, spec.order)
    sel = _select(system, grid, variant)
    return system.fit(sel.lam), sel


def completed_responses(sample: LabeledSample, predictor) -> np.ndarray:
    """Observed ``y`` where ``delta=1``, predictions elsewhere."""
    values = np.where(sample.responders, sample.y, 0.0)
    missing = ~sample.responders
    if missing.any():
        values[missing] = predictor(sample.X[missing])
    return values


def impute_estimate(sample: LabeledSample, model) -> float:
    """Imputation mean ``n^{-1} sum {delta y + (1 - delta) m(x)}``."""
    return float(np.mean(completed_responses(sample, model.predict)))
