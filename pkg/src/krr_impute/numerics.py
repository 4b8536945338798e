"""Shared numerical routines: SPD solves, an L-BFGS minimizer, normal
quantiles and a central-difference gradient used as a test oracle."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
from scipy.special import ndtri

from .errors import InvalidInput, NonFiniteObjective, NumericalSingularity

CHOLESKY = "cholesky"
LDLT_FALLBACK = "ldlt_fallback"


@dataclass(frozen=True)
class SolveReport:
    solution: np.ndarray
    residual_norm: float
    method: str


def solve_spd(M, b, ridge: float = 0.0) -> SolveReport:
    """Solve ``(M + ridge I) x = b`` for symmetric ``M``.

    Cholesky first; an LDL^T factorization is tried when Cholesky fails.
    The residual must satisfy ``|r| <= 1e-8 (1 + |b|)``.
    """
    M = np.asarray(M, dtype=float)
    b = np.asarray(b, dtype=float)
    if ridge < 0:
        raise InvalidInput("ridge must be non-negative")
    A = M + ridge * np.eye(M.shape[0]) if ridge else M
    method = CHOLESKY
    try:
        x = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A, lower=True), b)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        method = LDLT_FALLBACK
        x = _ldl_solve(A, b)
    resid = float(np.linalg.norm(A @ x - b))
    if not np.all(np.isfinite(x)) or resid > 1e-8 * (1.0 + np.linalg.norm(b)):
        raise NumericalSingularity(f"linear solve failed (residual {resid:.3e}, method {method})")
    return SolveReport(solution=x, residual_norm=resid, method=method)


def _ldl_solve(A, b):
    lu, d, perm = scipy.linalg.ldl(A, lower=True)
    L = lu[perm]
    try:
        z = scipy.linalg.solve_triangular(L, b[perm], lower=True, unit_diagonal=True)
        w = scipy.linalg.solve(d, z, assume_a="sym")
        y = scipy.linalg.solve_triangular(L.T, w, lower=False, unit_diagonal=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as exc:
        raise NumericalSingularity(str(exc)) from exc
    x = np.empty_like(y)
    x[perm] = y
    return x


@dataclass(frozen=True)
class OptimResult:
    minimizer: np.ndarray
    objective_value: float
    gradient_inf_norm: float
    iterations: int
    converged: bool


def minimize(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    gtol: float | None = None,
    max_iter: int = 1000,
    memory: int = 10,
    c1: float = 1e-4,
) -> OptimResult:
    """Limited-memory BFGS with Armijo backtracking (step halving).

    ``f`` returns ``(value, gradient)``. Stops when the gradient infinity
    norm drops to ``gtol`` (default ``1e-8 (1 + |f(x0)|)``) or after
    ``max_iter`` iterations. A line search that finds no strict decrease
    (the objective is flat to rounding) also ends the run; ``converged``
    then reports whether the gradient tolerance was met.
    """
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidInput("x0 must be finite")
    fx, g = f(x)
    g = np.asarray(g, dtype=float)
    _require_finite(fx, g)
    if gtol is None:
        gtol = 1e-8 * (1.0 + abs(fx))

    s_hist: deque = deque(maxlen=memory)
    y_hist: deque = deque(maxlen=memory)
    rho_hist: deque = deque(maxlen=memory)
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    it = 0
    while gnorm > gtol and it < max_iter:
        d = -_two_loop(g, s_hist, y_hist, rho_hist)
        slope = float(g @ d)
        if not slope < 0:
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            d = -g
            slope = float(g @ d)
        if not s_hist:
            # first step: scale steepest descent to unit length
            d = d / max(1.0, float(np.linalg.norm(d)))
            slope = float(g @ d)

        step = 1.0
        accepted = False
        for _ in range(50):
            x_new = x + step * d
            f_new, g_new = f(x_new)
            if np.isfinite(f_new) and f_new < fx and f_new <= fx + c1 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        g_new = np.asarray(g_new, dtype=float)
        _require_finite(f_new, g_new)

        s = x_new - x
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yv)):
            s_hist.append(s)
            y_hist.append(yv)
            rho_hist.append(1.0 / sy)
        x, fx, g = x_new, float(f_new), g_new
        gnorm = float(np.max(np.abs(g)))
        it += 1

    return OptimResult(minimizer=x, objective_value=float(fx), gradient_inf_norm=gnorm,
                       iterations=it, converged=gnorm <= gtol)


def _two_loop(g, s_hist, y_hist, rho_hist):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def _require_finite(value, grad):
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteObjective("objective or gradient is not finite")


def norm_quantile(p: float) -> float:
    """Standard normal quantile function."""
    if not 0.0 < p < 1.0:
        raise InvalidInput(f"probability must lie in (0, 1), got {p}")
    return float(ndtri(p))


def fd_gradient(f: Callable[[np.ndarray], float], x, h=1e-6) -> np.ndarray:
    """Central-difference gradient; ``h`` may be a scalar or per-coordinate array."""
    x = np.array(x, dtype=float)
    h = np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    if np.any(h <= 0):
        raise InvalidInput("step must be positive")
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h.flat[i]
        grad.flat[i] = (f(x + e) - f(x - e)) / (2.0 * h.flat[i])
    return grad
