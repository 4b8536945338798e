"""Monte Carlo studies for Models A-F under a MAR response mechanism.

Every replicate draws from its own generator keyed by ``(seed, replicate)``,
so results do not depend on execution order or worker count.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache, partial
from pathlib import Path

import numpy as np
from scipy.special import expit
from threadpoolctl import threadpool_limits

from . import baselines, krr
from .errors import InvalidInput, KrrImputeError, TooManyFailures
from .inference import DEFAULT_LEVELS, estimate_mean
from .kernels import KernelSpec

SIGMA = math.sqrt(3.0)
BETA = np.array([-1.0, 0.5, -0.25, -0.1])
RESPONSE_SHIFT = 2.5
X_LOW, X_HIGH = 1.0, 3.0
DIM = 4

MODELS = ("A", "B", "C", "D", "E", "F")
CONTINUOUS = ("A", "B", "C")
METHODS = ("KRR", "BSpline", "Linear")
METHOD_LABELS = {"KRR": "KRR", "BSpline": "B-spline", "Linear": "Linear"}

# Coarser than the library default: tiny tau values dominate the cost of
# each replicate and are never selected under the 0/1 CV loss.
SIM_TAU_GRID = tuple(np.geomspace(1e-3, 1e2, 6))

TRUTH_DRAWS = 10_000_000
TRUTH_SEED = 20_240_601


def _index(model, X):
    x1, x2, x3, x4 = X.T
    if model == "A":
        return 3 + 2.5 * x1 + 2.75 * x2 + 2.5 * x3 + 2.25 * x4
    if model == "B":
        return 3 + x1**2 * x2**3 * x3 / 35 + 0.1 * x4
    if model == "C":
        return 3 + x1**2 * x2**3 * x3 * x4**2 / 180
    if model == "D":
        return 0.5 + x1**2 * x2**3 * x3 / 35 + 0.1 * x4
    if model == "E":
        return 0.5 + x1**2 * x2**3 * x3 * x4**2 / 180
    if model == "F":
        return 0.5 + 0.15 * x1 * x2 * x3**2 + 0.4 * x2 * x3
    raise InvalidInput(f"unknown model {model!r}")


def mean_function(model: str, X) -> np.ndarray:
    """``E(Y | x)``: the regression function, or the success probability for D-F."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    eta = _index(model, X)
    return eta if model in CONTINUOUS else expit(eta)


def response_probability(X) -> np.ndarray:
    """``P(delta = 1 | x) = expit(x'beta + 2.5)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return expit(X @ BETA + RESPONSE_SHIFT)


def draw_outcome(model: str, X, rng, noise_scale: float = SIGMA) -> np.ndarray:
    m = mean_function(model, X)
    if model in CONTINUOUS:
        return m + noise_scale * rng.standard_normal(m.size)
    return (rng.uniform(size=m.size) < m).astype(float)


def _uniform_moment(k):
    return (X_HIGH ** (k + 1) - X_LOW ** (k + 1)) / ((k + 1) * (X_HIGH - X_LOW))


@lru_cache(maxsize=None)
def true_theta_with_se(model: str) -> tuple[float, float]:
    """Population mean of Y and the standard error of that value.

    Models A-C are polynomials in independent uniforms, so their means are
    exact moment products. Models D-F average the success probability over
    ``TRUTH_DRAWS`` covariate draws from a dedicated stream.
    """
    m = _uniform_moment
    if model == "A":
        return 3 + (2.5 + 2.75 + 2.5 + 2.25) * m(1), 0.0
    if model == "B":
        return 3 + m(2) * m(3) * m(1) / 35 + 0.1 * m(1), 0.0
    if model == "C":
        return 3 + m(2) * m(3) * m(1) * m(2) / 180, 0.0
    if model not in MODELS:
        raise InvalidInput(f"unknown model {model!r}")
    rng = np.random.default_rng(np.random.SeedSequence(TRUTH_SEED, spawn_key=(MODELS.index(model),)))
    total = total_sq = 0.0
    chunk = 1_000_000
    for _ in range(TRUTH_DRAWS // chunk):
        p = mean_function(model, rng.uniform(X_LOW, X_HIGH, size=(chunk, DIM)))
        total += p.sum()
        total_sq += (p * p).sum()
    mean = total / TRUTH_DRAWS
    var = total_sq / TRUTH_DRAWS - mean**2
    return float(mean), float(math.sqrt(var / TRUTH_DRAWS))


def true_theta(model: str) -> float:
    return true_theta_with_se(model)[0]


@dataclass(frozen=True)
class SimConfig:
    model: str
    n: int
    replications: int
    seed: int = 0
    methods: tuple = METHODS
    kernel: KernelSpec = field(default_factory=KernelSpec)
    lambda_grid: tuple | None = None
    tau_grid: tuple = SIM_TAU_GRID
    n_folds: int = 5
    gcv_variant: str = krr.SQUARED_TRACE
    levels: tuple = DEFAULT_LEVELS
    knots: int = baselines.DEFAULT_KNOTS
    max_failure_rate: float = 0.01

    def __post_init__(self):
        if self.model not in MODELS:
            raise InvalidInput(f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
        if self.n < 50:
            raise InvalidInput("n must be at least 50")
        if self.replications < 1:
            raise InvalidInput("need at least one replication")
        unknown = set(self.methods) - set(METHODS)
        if unknown or not self.methods:
            raise InvalidInput(f"unknown methods {sorted(unknown)}")
        object.__setattr__(self, "methods", tuple(m for m in METHODS if m in self.methods))

    def summary(self) -> dict:
        return {
            "model": self.model, "n": self.n, "replications": self.replications,
            "seed": self.seed, "methods": list(self.methods), "kernel": self.kernel.summary(),
            "lambda_grid": None if self.lambda_grid is None else list(self.lambda_grid),
            "tau_grid": list(self.tau_grid), "n_folds": self.n_folds,
            "gcv_variant": self.gcv_variant, "levels": list(self.levels), "knots": self.knots,
        }


@dataclass(frozen=True, eq=False)
class SimDraw:
    sample: krr.LabeledSample
    y_full: np.ndarray
    m_true: np.ndarray
    pi_true: np.ndarray
    theta: float

    @property
    def theta_tilde(self) -> float:
        """Linearized estimator built from the true regression and propensity."""
        s = self.sample
        return float(np.mean(self.m_true + s.delta / self.pi_true * (self.y_full - self.m_true)))


def replicate_rng(seed: int, replicate_index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate_index, stream)))


def generate(config: SimConfig, replicate_index: int) -> SimDraw:
    rng = replicate_rng(config.seed, replicate_index)
    X = rng.uniform(X_LOW, X_HIGH, size=(config.n, DIM))
    y = draw_outcome(config.model, X, rng)
    pi = response_probability(X)
    delta = (rng.uniform(size=config.n) < pi).astype(np.int8)
    y_obs = np.where(delta == 1, y, np.nan)
    return SimDraw(sample=krr.LabeledSample(X, y_obs, delta), y_full=y,
                   m_true=mean_function(config.model, X), pi_true=pi,
                   theta=true_theta(config.model))


def run_replicate(config: SimConfig, replicate_index: int) -> dict:
    """One generate-and-estimate cycle; failures are returned, not raised."""
    try:
        draw = generate(config, replicate_index)
        s = draw.sample
        out = {"index": replicate_index, "theta_tilde": draw.theta_tilde, "estimates": {},
               "out_of_range": {}}
        binary = config.model not in CONTINUOUS
        if "KRR" in config.methods:
            rep = estimate_mean(s, config.kernel, lambda_grid=config.lambda_grid,
                                gcv_variant=config.gcv_variant, tau_grid=config.tau_grid,
                                n_folds=config.n_folds, seed=replicate_rng(config.seed, replicate_index, 1),
                                levels=config.levels)
            out["estimates"]["KRR"] = rep.theta_hat
            out["variance_hat"] = rep.variance_hat
            out["covers"] = {lv: bool(lo <= draw.theta <= hi) for lv, (lo, hi) in rep.ci.items()}
            out["lambda"] = rep.lam
            out["tau"] = rep.tau
            if binary:
                out["out_of_range"]["KRR"] = baselines.out_of_range_count(rep.krr_model.predict(s.X[~s.responders]))
        for name, fitter in (("BSpline", lambda: baselines.fit_bspline(s, config.knots)),
                             ("Linear", lambda: baselines.fit_linear(s))):
            if name in config.methods:
                model = fitter()
                out["estimates"][name] = baselines.impute_with(model, s)
                if binary:
                    out["out_of_range"][name] = baselines.out_of_range_count(model.predict(s.X[~s.responders]))
        return out
    except (KrrImputeError, np.linalg.LinAlgError) as exc:
        return {"index": replicate_index, "error": f"{type(exc).__name__}: {exc}"}


def _single_threaded_replicate(config, index):
    with threadpool_limits(limits=1):
        return run_replicate(config, index)


def _method_stats(est, theta):
    R = est.size
    err = est - theta
    bias = float(err.mean())
    var = float(est.var(ddof=1)) if R > 1 else 0.0
    sq = err**2
    return {
        "bias": bias,
        "variance": var,
        "mse": float(sq.mean()),
        "bias_se": math.sqrt(var / R),
        "variance_se": var * math.sqrt(2.0 / (R - 1)) if R > 1 else float("nan"),
        "mse_se": float(sq.std(ddof=1) / math.sqrt(R)) if R > 1 else float("nan"),
    }


@dataclass
class SimReport:
    config: SimConfig
    theta: float
    theta_se: float
    methods: dict
    replicates: list = field(repr=False)
    failures: list = field(default_factory=list)
    krr: dict = field(default_factory=dict)
    degenerate: bool = False

    @property
    def n_success(self) -> int:
        return len(self.replicates)

    def estimates(self, method: str) -> np.ndarray:
        return np.array([r["estimates"][method] for r in self.replicates])

    def subset(self, count: int) -> "SimReport":
        """Report restricted to the first ``count`` replicate indices."""
        keep = [r for r in self.replicates if r["index"] < count]
        fails = [f for f in self.failures if f["index"] < count]
        cfg = SimConfig(**{**self.config.__dict__, "replications": count})
        return aggregate(cfg, keep, fails)

    def to_dict(self) -> dict:
        return {
            "config": self.config.summary(),
            "theta_true": self.theta,
            "theta_true_se": self.theta_se,
            "n_success": self.n_success,
            "n_failed": len(self.failures),
            "failures": self.failures,
            "degenerate": self.degenerate,
            "methods": self.methods,
            "krr_inference": self.krr,
        }

    def table_rows(self) -> list[list]:
        cfg = self.config
        header = ["Model", "Sample Size", "Criteria"] + [METHOD_LABELS[m] for m in cfg.methods]
        rows = [header]
        for key, label in (("bias", "Bias"), ("variance", "Var"), ("mse", "MSE")):
            rows.append([cfg.model, cfg.n, label] + [_fmt(self.methods[m][key]) for m in cfg.methods])
        if self.krr:
            pad = [""] * (len(cfg.methods) - 1)
            rows.append([cfg.model, cfg.n, "R.B."] + [_fmt(self.krr["relative_bias"])] + pad)
            for lv, cov in self.krr["coverage"].items():
                rows.append([cfg.model, cfg.n, f"C.R. ({float(lv):.0%})"] + [f"{100 * cov['rate']:.1f}%"] + pad)
        return rows


def _fmt(x):
    return f"{x:.5f}" if x == x else "nan"


def aggregate(config: SimConfig, replicates: list, failures: list) -> SimReport:
    theta, theta_se = true_theta_with_se(config.model)
    replicates = sorted(replicates, key=lambda r: r["index"])
    if not replicates:
        raise TooManyFailures("every replicate failed")
    methods = {m: _method_stats(np.array([r["estimates"][m] for r in replicates]), theta)
               for m in config.methods}
    R = len(replicates)
    krr_info = {}
    if "KRR" in config.methods:
        est = np.array([r["estimates"]["KRR"] for r in replicates])
        vhat = np.array([r["variance_hat"] for r in replicates])
        var_mc = methods["KRR"]["variance"]
        tilde = np.array([r["theta_tilde"] for r in replicates])
        if R > 1 and var_mc > 0:
            ratio = vhat.mean() / var_mc
            rb_se = math.sqrt(vhat.var(ddof=1) / R / var_mc**2 + ratio**2 * 2.0 / (R - 1))
            rb = ratio - 1.0
        else:
            rb, rb_se = float("nan"), float("nan")
        coverage = {}
        for lv in config.levels:
            hits = np.array([r["covers"][float(lv)] for r in replicates], dtype=float)
            rate = float(hits.mean())
            coverage[f"{float(lv):g}"] = {"rate": rate, "se": math.sqrt(rate * (1 - rate) / R)}
        gap = np.abs(est - tilde)
        krr_info = {
            "mean_variance_hat": float(vhat.mean()),
            "relative_bias": float(rb),
            "relative_bias_se": float(rb_se),
            "coverage": coverage,
            "mean_abs_linearization_gap": float(gap.mean()),
            "scaled_linearization_gap": float(gap.mean() * math.sqrt(config.n)),
        }
    return SimReport(config=config, theta=theta, theta_se=theta_se, methods=methods,
                     replicates=replicates, failures=failures, krr=krr_info, degenerate=R == 1)


def run_mc(config: SimConfig, workers: int = 1) -> SimReport:
    """Run all replicates and aggregate Bias/Var/MSE, relative bias and coverage.

    Raises :class:`TooManyFailures` as soon as failed replicates exceed
    ``max_failure_rate`` of the requested count.
    """
    limit = config.max_failure_rate * config.replications
    indices = range(config.replications)
    task = partial(_single_threaded_replicate, config)
    ok, failed = [], []

    def consume(results):
        for res in results:
            if "error" in res:
                failed.append({"index": res["index"], "error": res["error"]})
                if len(failed) > limit:
                    raise TooManyFailures(f"{len(failed)} of {config.replications} replicates failed; "
                                          f"first error: {failed[0]['error']}")
            else:
                ok.append(res)

    if workers <= 1:
        consume(map(task, indices))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunk = max(1, config.replications // (4 * workers))
            try:
                consume(pool.map(task, indices, chunksize=chunk))
            except TooManyFailures:
                pool.shutdown(wait=False, cancel_futures=True)
                raise
    return aggregate(config, ok, failed)


def write_outputs(report: SimReport, outdir) -> dict:
    """Write ``report.json``, ``table.csv`` and ``replicates.csv`` into ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"report": outdir / "report.json", "table": outdir / "table.csv",
             "replicates": outdir / "replicates.csv"}
    paths["report"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(paths["table"], "w", newline="") as fh:
        csv.writer(fh).writerows(report.table_rows())
    methods = report.config.methods
    with open(paths["replicates"], "w", newline="") as fh:
        w = csv.writer(fh)
        extra = ["variance_hat"] if "KRR" in methods else []
        w.writerow(["replicate"] + list(methods) + extra + ["theta_tilde"])
        for r in report.replicates:
            row = [r["index"]] + [repr(r["estimates"][m]) for m in methods]
            row += [repr(r["variance_hat"])] if extra else []
            w.writerow(row + [repr(r["theta_tilde"])])
    return paths
