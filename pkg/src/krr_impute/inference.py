"""Linearization variance estimation and confidence intervals for the
KRR imputation mean."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import density_ratio, krr
from .errors import InvalidInput
from .kernels import KernelSpec
from .numerics import norm_quantile

DEFAULT_LEVELS = (0.90, 0.95)


def influence_values(sample: krr.LabeledSample, krr_model, ratio_model) -> np.ndarray:
    """``eta_i = m(x_i) + delta_i omega(x_i) {y_i - m(x_i)}``."""
    m_hat = krr_model.predict(sample.X)
    w = density_ratio.omega(ratio_model, sample.X)
    return _eta(sample, m_hat, w)


def _eta(sample, m_hat, w):
    r = sample.responders
    resid = np.where(r, sample.y, m_hat) - m_hat
    return m_hat + r * w * resid


def variance_estimate(eta) -> float:
    """``n^{-1} (n-1)^{-1} sum (eta_i - mean(eta))^2``."""
    eta = np.asarray(eta, dtype=float)
    n = eta.size
    if n < 2:
        raise InvalidInput("variance estimation needs at least two values")
    if np.all(eta == eta[0]):
        # the mean of equal floats can round away from them
        return 0.0
    return float(np.sum((eta - eta.mean()) ** 2) / (n * (n - 1)))


def confidence_interval(theta_hat: float, variance_hat: float, level: float) -> tuple[float, float]:
    if not 0.0 < level < 1.0:
        raise InvalidInput(f"confidence level must lie in (0, 1), got {level}")
    if variance_hat < 0:
        raise InvalidInput("variance must be non-negative")
    half = norm_quantile((1.0 + level) / 2.0) * np.sqrt(variance_hat)
    return float(theta_hat - half), float(theta_hat + half)


@dataclass
class ImputationReport:
    theta_hat: float
    variance_hat: float
    std_error: float
    ci: dict
    n: int
    n1: int
    n0: int
    lam: float
    tau: float
    diagnostics: dict = field(default_factory=dict)
    krr_model: object = field(default=None, repr=False)
    ratio_model: object = field(default=None, repr=False)
    eta: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat,
            "variance_hat": self.variance_hat,
            "std_error": self.std_error,
            "ci": {f"{level:g}": list(bounds) for level, bounds in self.ci.items()},
            "n": self.n,
            "n1": self.n1,
            "n0": self.n0,
            "lambda": self.lam,
            "tau": None if np.isnan(self.tau) else self.tau,
            "diagnostics": self.diagnostics,
        }


def estimate_mean(
    sample: krr.LabeledSample,
    spec: KernelSpec | None = None,
    *,
    lambda_grid=None,
    gcv_variant: str = krr.SQUARED_TRACE,
    tau_grid=None,
    n_folds: int = 5,
    seed=0,
    levels=DEFAULT_LEVELS,
    c_min: float = density_ratio.DEFAULT_C_MIN,
) -> ImputationReport:
    """Full pipeline: GCV-tuned KRR imputation, CV-tuned density-ratio
    weights, linearized variance and normal intervals."""
    spec = spec or KernelSpec()
    model, lam_sel = krr.fit_gcv(sample, spec, lambda_grid, gcv_variant)
    m_hat = model.predict(sample.X)
    completed = np.where(sample.responders, sample.y, m_hat)
    theta = float(np.mean(completed))

    ratio, tau_sel = density_ratio.estimate_weights(sample, spec, tau_grid, n_folds, seed)
    w = density_ratio.omega(ratio, sample.X)
    max_w = density_ratio.check_weight_bound(w, c_min)

    eta = _eta(sample, m_hat, w)
    v = variance_estimate(eta)
    ci = {float(level): confidence_interval(theta, v, level) for level in levels}
    diagnostics = {
        "max_omega": max_w,
        "gcv_variant": gcv_variant,
        "kernel": model.spec.summary(),
        "lambda_at_grid_edge": bool(lam_sel.lam in (lam_sel.grid.min(), lam_sel.grid.max())),
        "ratio_converged": ratio.converged,
        "ratio_exp_clamped": ratio.exp_clamped,
        "tau_cv_folds": tau_sel.n_folds if tau_sel is not None else 0,
    }
    return ImputationReport(
        theta_hat=theta, variance_hat=v, std_error=float(np.sqrt(v)), ci=ci,
        n=sample.n, n1=sample.n1, n0=sample.n0, lam=model.lam,
        tau=ratio.tau if tau_sel is not None else float("nan"),
        diagnostics=diagnostics, krr_model=model, ratio_model=ratio, eta=eta,
    )
