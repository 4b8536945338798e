"""Maximum-entropy density-ratio estimation in an RKHS.

The ratio ``g(x) = f(x | delta=0) / f(x | delta=1)`` is modelled as
``exp{alpha0 + sum_j alpha_j K(x, x_j)}`` and fitted by minimizing

    (1/n1) sum_{delta=1} exp(h_i) - (1/n0) sum_{delta=0} h_i + tau alpha' K alpha

with ``h_i = alpha0 + (K alpha)_i``. Inverse response probabilities follow
from ``omega(x) = 1 + (n0/n1) g(x)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import (
    InvalidInput,
    NonFiniteRiskWarning,
    PropensityBoundWarning,
    StratumTooSmall,
)
from .kernels import InputScaler, KernelSpec, check_psd, gram_scaled
from .krr import LabeledSample
from .numerics import minimize

EXP_CLAMP = 700.0
DEFAULT_C_MIN = 0.01
_EIG_RTOL = 1e-12
# objective values are O(1); gradients below ~1e-7 are at rounding level
RATIO_GTOL = 1e-6


def default_tau_grid(num: int = 20) -> np.ndarray:
    return np.geomspace(1e-6, 1e2, num)


@dataclass(frozen=True, eq=False)
class DensityRatioModel:
    spec: KernelSpec
    scaler: InputScaler
    support_points: np.ndarray  # scaled covariates the expansion is built on
    alpha0: float
    alpha: np.ndarray
    tau: float
    n0: int
    n1: int
    exp_clamped: bool = False
    converged: bool = True
    iterations: int = 0

    def log_ratio(self, X) -> np.ndarray:
        Z = self.scaler.transform(X)
        return self.alpha0 + gram_scaled(self.spec, Z, self.support_points) @ self.alpha

    def ratio(self, X) -> np.ndarray:
        return np.exp(np.minimum(self.log_ratio(X), EXP_CLAMP))

    def omega(self, X) -> np.ndarray:
        return omega(self, X)


def omega(model: DensityRatioModel, X) -> np.ndarray:
    """Estimated inverse response probability ``1 + (n0/n1) g(x)``; always >= 1."""
    if model.n0 == 0:
        return np.ones(model.scaler.transform(X).shape[0])
    return 1.0 + (model.n0 / model.n1) * model.ratio(X)


def response_probability(model: DensityRatioModel, X) -> np.ndarray:
    """``p(x) = n1 / (n1 + n0 g(x))``, the implied response probability."""
    return 1.0 / omega(model, X)


def _counts(delta):
    delta = np.asarray(delta)
    n1 = int(np.sum(delta == 1))
    n0 = int(np.sum(delta == 0))
    if n1 < 1 or n0 < 1:
        raise InvalidInput("density-ratio fitting needs at least one responder and one non-responder")
    return n0, n1


def objective_from_gram(K, delta, tau, alpha0, alpha):
    """Objective value and gradient in ``(alpha0, alpha)`` for a precomputed Gram."""
    delta = np.asarray(delta)
    n0, n1 = _counts(delta)
    alpha = np.asarray(alpha, dtype=float)
    Ka = K @ alpha
    h = alpha0 + Ka
    r = delta == 1
    e = np.exp(np.minimum(h[r], EXP_CLAMP))
    value = e.sum() / n1 - h[~r].sum() / n0 + tau * float(alpha @ Ka)
    w = np.zeros_like(h)
    w[r] = e / n1
    w[~r] = -1.0 / n0
    grad = np.empty(alpha.size + 1)
    grad[0] = e.sum() / n1 - 1.0
    grad[1:] = K.T @ w + 2.0 * tau * Ka
    return float(value), grad


def objective(sample: LabeledSample, spec: KernelSpec, tau: float, alpha0: float, alpha):
    """Penalized entropy loss and its gradient (length ``n + 1``, ``alpha0`` first)."""
    scaler = InputScaler.fit(sample.X)
    Z = scaler.transform(sample.X)
    K = gram_scaled(spec.resolve(Z[sample.responders]), Z)
    return objective_from_gram(K, sample.delta, tau, alpha0, alpha)


def normalize_from_scores(scores, delta) -> float:
    """``alpha0`` solving ``n1 = sum_{delta=1} exp(alpha0 + s_i)``."""
    delta = np.asarray(delta)
    r = delta == 1
    n1 = int(r.sum())
    if n1 < 1:
        raise InvalidInput("normalization needs at least one responder")
    return float(np.log(n1) - logsumexp(np.asarray(scores, dtype=float)[r]))


def normalize_alpha0(sample: LabeledSample, spec: KernelSpec, alpha) -> float:
    scaler = InputScaler.fit(sample.X)
    Z = scaler.transform(sample.X)
    K = gram_scaled(spec.resolve(Z[sample.responders]), Z)
    return normalize_from_scores(K @ np.asarray(alpha, dtype=float), sample.delta)


class _RatioProblem:
    """The objective rewritten in whitened coordinates.

    With ``K_SS = U L U'`` on the support set S, ``alpha_S = U L^{-1/2} beta``
    turns the penalty into ``|beta|^2`` and the linear predictor into
    ``alpha0 + Phi beta``. The map is exact on the range of ``K_SS``;
    directions in its null space change neither ``h`` nor the penalty.
    """

    def __init__(self, K, delta, support=None):
        self.K = K
        self.delta = np.asarray(delta)
        self.n0, self.n1 = _counts(self.delta)
        n = K.shape[0]
        self.support = np.arange(n) if support is None else np.flatnonzero(support)
        K_SS = K[np.ix_(self.support, self.support)]
        evals, evecs = np.linalg.eigh(K_SS)
        check_psd(K_SS, evals)
        keep = evals > _EIG_RTOL * max(evals[-1], 0.0)
        self.U = evecs[:, keep]
        self.root = np.sqrt(evals[keep])
        if support is None:
            self.Phi = self.U * self.root
        else:
            self.Phi = K[:, self.support] @ (self.U / self.root)
        r = self.delta == 1
        self.Phi_r = self.Phi[r]
        self.mean_nonresp = self.Phi[~r].sum(axis=0) / self.n0

    @property
    def dim(self) -> int:
        return self.Phi.shape[1] + 1

    def evaluate(self, z, tau):
        a0, beta = z[0], z[1:]
        h_r = a0 + self.Phi_r @ beta
        e = np.exp(np.minimum(h_r, EXP_CLAMP))
        se = e.sum() / self.n1
        # sum over non-responders of h equals n0 * (a0 + mean_nonresp @ beta)
        value = se - (a0 + self.mean_nonresp @ beta) + tau * float(beta @ beta)
        grad = np.empty_like(z)
        grad[0] = se - 1.0
        grad[1:] = self.Phi_r.T @ e / self.n1 - self.mean_nonresp + 2.0 * tau * beta
        return float(value), grad

    def alpha_from(self, beta):
        alpha = np.zeros(self.K.shape[0])
        alpha[self.support] = self.U @ (beta / self.root)
        return alpha

    def solve(self, tau, z0=None, gtol=RATIO_GTOL, max_iter=2000):
        z0 = np.zeros(self.dim) if z0 is None else z0
        res = minimize(lambda z: self.evaluate(z, tau), z0, gtol=gtol, max_iter=max_iter)
        beta = res.minimizer[1:]
        alpha = self.alpha_from(beta)
        scores = self.Phi @ beta
        alpha0 = normalize_from_scores(scores, self.delta)
        clamped = bool(np.max(alpha0 + scores[self.delta == 1]) >= EXP_CLAMP)
        return alpha0, alpha, res, clamped


def _prepare(sample: LabeledSample, spec: KernelSpec):
    scaler = InputScaler.fit(sample.X)
    Z = scaler.transform(sample.X)
    spec = spec.resolve(Z[sample.responders])
    return scaler, Z, spec


def fit_ratio(sample: LabeledSample, spec: KernelSpec, tau: float, *, support=None,
              gtol: float = RATIO_GTOL, max_iter: int = 2000) -> DensityRatioModel:
    """Minimize the penalized entropy loss from zero and normalize ``alpha0``.

    ``support`` optionally masks which units carry a coefficient; the rest
    are held at zero.
    """
    if not tau > 0:
        raise InvalidInput("tau must be positive")
    scaler, Z, spec = _prepare(sample, spec)
    K = gram_scaled(spec, Z)
    return _fit_on_gram(K, Z, sample.delta, spec, scaler, tau, support, gtol, max_iter)


def _fit_on_gram(K, Z, delta, spec, scaler, tau, support=None, gtol=RATIO_GTOL, max_iter=2000,
                 problem=None, z0=None):
    problem = problem or _RatioProblem(K, delta, support)
    alpha0, alpha, res, clamped = problem.solve(tau, z0=z0, gtol=gtol, max_iter=max_iter)
    if clamped:
        warnings.warn("density-ratio exponent reached the overflow clamp", NonFiniteRiskWarning,
                      stacklevel=3)
    return DensityRatioModel(spec=spec, scaler=scaler, support_points=Z, alpha0=alpha0,
                             alpha=alpha, tau=float(tau), n0=problem.n0, n1=problem.n1,
                             exp_clamped=clamped, converged=res.converged,
                             iterations=res.iterations)


def degenerate_model(sample: LabeledSample, spec: KernelSpec) -> DensityRatioModel:
    """Model for fully observed data: ``g = 1`` and ``omega = 1``."""
    scaler, Z, spec = _prepare(sample, spec)
    return DensityRatioModel(spec=spec, scaler=scaler, support_points=Z, alpha0=0.0,
                             alpha=np.zeros(sample.n), tau=float("nan"), n0=sample.n0,
                             n1=sample.n1)


def stratified_folds(delta, n_folds: int, seed) -> np.ndarray:
    """Fold label per unit; each response stratum is shuffled and dealt round-robin."""
    delta = np.asarray(delta)
    if n_folds < 2:
        raise InvalidInput("need at least two folds")
    rng = np.random.default_rng(seed)
    folds = np.empty(delta.size, dtype=int)
    for stratum in (0, 1):
        idx = np.flatnonzero(delta == stratum)
        if idx.size < n_folds:
            raise StratumTooSmall(f"stratum delta={stratum} has {idx.size} units, fewer than {n_folds} folds")
        folds[rng.permutation(idx)] = np.arange(idx.size) % n_folds
    return folds


def classification_loss(delta, p_hat) -> np.ndarray:
    """0/1 loss: a responder with ``p < 0.5`` or a non-responder with ``p > 0.5``."""
    delta = np.asarray(delta)
    return ((delta == 1) & (p_hat < 0.5)) | ((delta == 0) & (p_hat > 0.5))


@dataclass(frozen=True)
class TauSelection:
    tau: float
    grid: np.ndarray = field(repr=False)
    scores: np.ndarray = field(repr=False)
    folds: np.ndarray | None = field(repr=False)

    @property
    def n_folds(self) -> int:
        return 0 if self.folds is None else int(self.folds.max()) + 1


def _cv_on_gram(K, delta, grid, n_folds, seed, gtol=RATIO_GTOL, max_iter=2000) -> TauSelection:
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise InvalidInput("tau grid is empty")
    if np.any(grid <= 0):
        raise InvalidInput("tau grid must be positive")
    folds = stratified_folds(delta, n_folds, seed)
    order = np.argsort(-grid, kind="stable")
    losses = np.zeros(grid.size)
    for k in range(n_folds):
        train = folds != k
        test = ~train
        K_tr = K[np.ix_(train, train)]
        K_te = K[np.ix_(test, train)]
        problem = _RatioProblem(K_tr, delta[train])
        z = None
        # large to small tau, warm-started from the previous solution
        for i in order:
            res = minimize(lambda v, t=grid[i]: problem.evaluate(v, t),
                           np.zeros(problem.dim) if z is None else z, gtol=gtol, max_iter=max_iter)
            z = res.minimizer
            alpha = problem.alpha_from(z[1:])
            alpha0 = normalize_from_scores(problem.Phi @ z[1:], delta[train])
            g = np.exp(np.minimum(alpha0 + K_te @ alpha, EXP_CLAMP))
            p_hat = problem.n1 / (problem.n1 + problem.n0 * g)
            losses[i] += classification_loss(delta[test], p_hat).sum()
    scores = losses / n_folds
    best = scores.min()
    tau = float(np.max(grid[scores == best]))
    return TauSelection(tau=tau, grid=grid, scores=scores, folds=folds)


def cv_select_tau(sample: LabeledSample, spec: KernelSpec, grid=None, n_folds: int = 5,
                  seed=0) -> tuple[float, np.ndarray]:
    """Stratified K-fold choice of ``tau``; ties go to the larger value."""
    scaler, Z, spec = _prepare(sample, spec)
    K = gram_scaled(spec, Z)
    sel = _cv_on_gram(K, sample.delta, default_tau_grid() if grid is None else grid, n_folds, seed)
    return sel.tau, sel.scores


def estimate_weights(sample: LabeledSample, spec: KernelSpec, tau_grid=None, n_folds: int = 5,
                     seed=0, gtol=RATIO_GTOL, max_iter: int = 2000):
    """Select ``tau`` by CV and fit on the full sample.

    Returns ``(model, selection)``; ``selection`` is ``None`` when every
    response is observed and the weights are identically one. When a
    response stratum is smaller than ``n_folds`` the fold count drops to
    its size; below two units CV is impossible and the largest grid value
    is used (the tie-breaking default), with NaN scores.
    """
    if sample.n0 == 0:
        return degenerate_model(sample, spec), None
    scaler, Z, spec = _prepare(sample, spec)
    K = gram_scaled(spec, Z)
    grid = np.asarray(default_tau_grid() if tau_grid is None else tau_grid, dtype=float).ravel()
    folds = min(n_folds, sample.n0, sample.n1)
    if folds >= 2:
        sel = _cv_on_gram(K, sample.delta, grid, folds, seed, gtol=gtol, max_iter=max_iter)
    else:
        if grid.size == 0 or np.any(grid <= 0):
            raise InvalidInput("tau grid must be non-empty and positive")
        sel = TauSelection(tau=float(grid.max()), grid=grid, scores=np.full(grid.size, np.nan), folds=None)
    model = _fit_on_gram(K, Z, sample.delta, spec, scaler, sel.tau, gtol=gtol, max_iter=max_iter)
    return model, sel


def check_weight_bound(omega_values, c_min: float = DEFAULT_C_MIN) -> float:
    """Warn when ``max omega > 1/c_min`` (propensity not bounded away from 0)."""
    top = float(np.max(omega_values))
    if top > 1.0 / c_min:
        warnings.warn(f"max estimated weight {top:.3g} exceeds 1/c_min = {1.0 / c_min:.3g}",
                      PropensityBoundWarning, stacklevel=2)
    return top
