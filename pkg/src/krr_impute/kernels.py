"""Reproducing kernels on the unit cube and Gram matrix construction.

Two families are provided. The Sobolev kernel of order ``l`` on [0, 1] is

    K(x, y) = sum_{q=0}^{l} k_q(x) k_q(y) + s * k_{2l}(|x - y|),
    k_q(t) = B_q(t) / q!,

with ``B_q`` the Bernoulli polynomials and ``s = +/-1`` a sign convention
(see :func:`validate_psd`). Multivariate inputs use the coordinate-wise
product of univariate kernels. The Gaussian kernel is the usual
``exp(-|x - y|^2 / (2 b^2))``.

All kernels act on min-max scaled coordinates produced by :class:`InputScaler`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.spatial.distance import pdist

from .errors import InvalidInput, NotPositiveSemidefinite

SOBOLEV = "sobolev"
GAUSSIAN = "gaussian"

PAPER_SIGN = "paper"
STANDARD_SIGN = "standard"

MAX_BERNOULLI_ORDER = 8
MAX_SOBOLEV_ORDER = 4
PSD_RTOL = 1e-8
_DOMAIN_TOL = 1e-12


@lru_cache(maxsize=None)
def _bernoulli_numbers(qmax: int) -> tuple[Fraction, ...]:
    # sum_{k=0}^{m} C(m+1, k) b_k = 0, giving b_1 = -1/2
    b = [Fraction(1)]
    for m in range(1, qmax + 1):
        acc = sum(math.comb(m + 1, k) * b[k] for k in range(m))
        b.append(-acc / (m + 1))
    return tuple(b)


@lru_cache(maxsize=None)
def _bernoulli_coefficients(q: int) -> np.ndarray:
    """Coefficients of B_q, highest power first (``np.polyval`` order)."""
    b = _bernoulli_numbers(q)
    coeffs = [math.comb(q, k) * b[k] for k in range(q + 1)]
    return np.array([float(c) for c in coeffs])


def _check_order(q):
    if not isinstance(q, (int, np.integer)) or q < 0 or q > MAX_BERNOULLI_ORDER:
        raise InvalidInput(f"Bernoulli order must be an integer in [0, {MAX_BERNOULLI_ORDER}], got {q!r}")


def bernoulli_poly(q: int, x):
    """Evaluate the Bernoulli polynomial ``B_q`` at ``x`` (scalar or array)."""
    _check_order(q)
    out = np.polyval(_bernoulli_coefficients(int(q)), np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def _scaled_bernoulli(q, x):
    return np.polyval(_bernoulli_coefficients(q), x) / math.factorial(q)


def sign_factor(order: int, convention: str) -> float:
    if convention == PAPER_SIGN:
        return float((-1) ** order)
    if convention == STANDARD_SIGN:
        return float((-1) ** (order - 1))
    raise InvalidInput(f"unknown sign convention {convention!r}")


def _check_unit_interval(*arrays):
    for a in arrays:
        a = np.asarray(a)
        if a.size and (np.nanmin(a) < -_DOMAIN_TOL or np.nanmax(a) > 1 + _DOMAIN_TOL or np.isnan(a).any()):
            raise InvalidInput("Sobolev kernel inputs must lie in [0, 1]; check the input scaler")


def sobolev_gram_1d(order: int, a, b, convention: str) -> np.ndarray:
    """Univariate Sobolev kernel matrix between the 1-d point sets ``a`` and ``b``."""
    if order < 1 or order > MAX_SOBOLEV_ORDER:
        raise InvalidInput(f"Sobolev order must be in [1, {MAX_SOBOLEV_ORDER}], got {order}")
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    _check_unit_interval(a, b)
    a = np.clip(a, 0.0, 1.0)
    b = np.clip(b, 0.0, 1.0)
    K = np.zeros((a.size, b.size))
    for q in range(order + 1):
        K += np.outer(_scaled_bernoulli(q, a), _scaled_bernoulli(q, b))
    K += sign_factor(order, convention) * _scaled_bernoulli(2 * order, np.abs(a[:, None] - b[None, :]))
    return K


def sobolev_kernel(order: int, x: float, y: float, convention: str = STANDARD_SIGN) -> float:
    """Univariate Sobolev kernel value ``K(x, y)`` for ``x, y`` in [0, 1]."""
    return float(sobolev_gram_1d(order, [x], [y], convention)[0, 0])


def gaussian_kernel(bandwidth: float, x, y) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise InvalidInput(f"dimension mismatch: {x.shape} vs {y.shape}")
    if not bandwidth > 0:
        raise InvalidInput("bandwidth must be positive")
    return float(np.exp(-np.sum((x - y) ** 2) / (2.0 * bandwidth**2)))


def min_eigenvalue_ok(eigenvalues, rtol: float = PSD_RTOL) -> bool:
    eigenvalues = np.asarray(eigenvalues)
    scale = np.max(np.abs(eigenvalues)) if eigenvalues.size else 0.0
    return bool(eigenvalues.size == 0 or eigenvalues.min() >= -rtol * scale)


def check_psd(G: np.ndarray, eigenvalues=None, rtol: float = PSD_RTOL) -> None:
    """Raise :class:`NotPositiveSemidefinite` if a square Gram matrix has a
    negative eigenvalue beyond ``rtol`` times the spectral radius."""
    if eigenvalues is None:
        eigenvalues = np.linalg.eigvalsh(G)
    if not min_eigenvalue_ok(eigenvalues, rtol):
        lo = float(np.min(eigenvalues))
        raise NotPositiveSemidefinite(f"Gram matrix has eigenvalue {lo:.3e} below tolerance")


@lru_cache(maxsize=None)
def validate_psd(order: int) -> str:
    """Pick the sign convention whose Gram matrix on a 50-point grid is PSD.

    The standard convention wins when both pass.
    """
    grid = np.linspace(0.0, 1.0, 50)
    passing = []
    for convention in (STANDARD_SIGN, PAPER_SIGN):
        G = sobolev_gram_1d(order, grid, grid, convention)
        if min_eigenvalue_ok(np.linalg.eigvalsh(G)):
            passing.append(convention)
    if not passing:
        raise NotPositiveSemidefinite(f"no sign convention gives a PSD Sobolev kernel of order {order}")
    return passing[0]


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and hyperparameters.

    ``sign=None`` defers the Sobolev sign convention to :func:`validate_psd`;
    ``bandwidth=None`` defers the Gaussian bandwidth to the median heuristic.
    """

    family: str = SOBOLEV
    order: int = 2
    bandwidth: float | None = None
    sign: str | None = None
    multivariate_rule: str = "product"

    def __post_init__(self):
        if self.family not in (SOBOLEV, GAUSSIAN):
            raise InvalidInput(f"unknown kernel family {self.family!r}")
        if self.family == SOBOLEV and not (1 <= self.order <= MAX_SOBOLEV_ORDER):
            raise InvalidInput(f"Sobolev order must be in [1, {MAX_SOBOLEV_ORDER}]")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise InvalidInput("bandwidth must be positive")
        if self.sign not in (None, PAPER_SIGN, STANDARD_SIGN):
            raise InvalidInput(f"unknown sign convention {self.sign!r}")
        if self.multivariate_rule != "product":
            raise InvalidInput("only the product rule is supported")

    @property
    def active_sign(self) -> str:
        return self.sign if self.sign is not None else validate_psd(self.order)

    def resolve(self, scaled_points: np.ndarray) -> "KernelSpec":
        """Fill in data-dependent defaults from (already scaled) points."""
        if self.family == SOBOLEV:
            return self if self.sign is not None else replace(self, sign=validate_psd(self.order))
        if self.bandwidth is None:
            return replace(self, bandwidth=median_bandwidth(scaled_points))
        return self

    def summary(self) -> dict:
        if self.family == SOBOLEV:
            return {"family": self.family, "order": self.order, "sign": self.active_sign,
                    "multivariate_rule": self.multivariate_rule}
        return {"family": self.family, "bandwidth": self.bandwidth}


def median_bandwidth(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if len(points) < 2:
        return 1.0
    med = float(np.median(pdist(points)))
    return med if med > 0 else 1.0


@dataclass(frozen=True, eq=False)
class InputScaler:
    """Per-coordinate min-max map onto [0, 1], learned from training covariates."""

    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def fit(cls, X) -> "InputScaler":
        X = _as_points(X)
        return cls(lower=X.min(axis=0), upper=X.max(axis=0))

    @property
    def dim(self) -> int:
        return self.lower.size

    def transform(self, X) -> np.ndarray:
        X = _as_points(X)
        if X.shape[1] != self.dim:
            raise InvalidInput(f"expected {self.dim} covariates, got {X.shape[1]}")
        span = self.upper - self.lower
        degenerate = span <= 0
        safe = np.where(degenerate, 1.0, span)
        Z = np.clip((X - self.lower) / safe, 0.0, 1.0)
        Z[:, degenerate] = 0.5
        return Z


def _as_points(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise InvalidInput("point set must be a non-empty 2-d array")
    return X


def gram_scaled(spec: KernelSpec, A: np.ndarray, B: np.ndarray | None = None) -> np.ndarray:
    """Gram matrix between point sets already mapped to [0, 1]^d."""
    A = _as_points(A)
    B = A if B is None else _as_points(B)
    if A.shape[1] != B.shape[1]:
        raise InvalidInput(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if spec.family == SOBOLEV:
        sign = spec.active_sign
        G = sobolev_gram_1d(spec.order, A[:, 0], B[:, 0], sign)
        for j in range(1, A.shape[1]):
            G *= sobolev_gram_1d(spec.order, A[:, j], B[:, j], sign)
        return G
    bw = spec.bandwidth if spec.bandwidth is not None else median_bandwidth(A)
    sq = np.zeros((A.shape[0], B.shape[0]))
    for j in range(A.shape[1]):
        sq += (A[:, j][:, None] - B[:, j][None, :]) ** 2
    return np.exp(-sq / (2.0 * bw**2))


def gram(spec: KernelSpec, scaler: InputScaler, A, B=None) -> np.ndarray:
    """Kernel matrix ``K(scale(A_i), scale(B_j))``; ``B=None`` means ``B = A``."""
    ZA = scaler.transform(A)
    ZB = None if B is None else scaler.transform(B)
    return gram_scaled(spec, ZA, ZB)
