"""Command line entry point: ``krr-impute {impute,simulate,ratio}``.

Options may also come from a JSON config file (``--config``) whose keys are
the long option names with dashes or underscores; explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import density_ratio, krr, simulation
from .errors import (
    AllMissing,
    InvalidInput,
    KrrImputeError,
    MalformedCsv,
    MissingInCovariates,
    NoMissingRowsWarning,
)
from .inference import confidence_interval, estimate_mean
from .kernels import KernelSpec

log = logging.getLogger("krr_impute")

COMMON_DEFAULTS = {
    "kernel": "sobolev",
    "order": 2,
    "bandwidth": None,
    "tau_grid": "auto",
    "folds": 5,
    "seed": 0,
    "output": "out",
    "covariates": None,
    "threads": None,
}
DEFAULTS = {
    "impute": {**COMMON_DEFAULTS, "gcv": krr.SQUARED_TRACE, "lambda_grid": "auto",
               "levels": "0.90,0.95", "c_min": density_ratio.DEFAULT_C_MIN},
    "simulate": {**COMMON_DEFAULTS, "gcv": krr.SQUARED_TRACE, "lambda_grid": "auto",
                 "tau_grid": "sim", "levels": "0.90,0.95", "n": 200, "reps": 100,
                 "methods": ",".join(simulation.METHODS), "knots": 3},
    "ratio": {**COMMON_DEFAULTS, "delta": "delta", "c_min": density_ratio.DEFAULT_C_MIN},
}
REQUIRED = {"impute": ("input", "response"), "simulate": ("model",), "ratio": ("input",)}


def _add_kernel_options(p):
    p.add_argument("--kernel", choices=["sobolev", "gaussian"])
    p.add_argument("--order", type=int, help="Sobolev order (1-4)")
    p.add_argument("--bandwidth", type=float, help="Gaussian bandwidth; default is the median heuristic")
    p.add_argument("--tau-grid", help="'auto', 'lo:hi:num' (log spaced) or comma list")
    p.add_argument("--folds", type=int, help="cross-validation folds for tau")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", help="output directory")
    p.add_argument("--threads", type=int, help="worker processes or BLAS threads (default: logical cores)")
    p.add_argument("--config", help="JSON file of option values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="krr-impute", description=__doc__.splitlines()[0],
                                     argument_default=argparse.SUPPRESS)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    imp = sub.add_parser("impute", help="impute a CSV response column and report the mean",
                         argument_default=argparse.SUPPRESS)
    imp.add_argument("--input")
    imp.add_argument("--response", help="name of the response column")
    imp.add_argument("--covariates", help="comma list; default is every other column")
    imp.add_argument("--gcv", choices=list(krr.GCV_VARIANTS))
    imp.add_argument("--lambda-grid", help="'auto', 'lo:hi:num' or comma list")
    imp.add_argument("--levels", help="comma list of confidence levels")
    imp.add_argument("--c-min", type=float, help="warn if any weight exceeds 1/c_min")
    _add_kernel_options(imp)

    sim = sub.add_parser("simulate", help="Monte Carlo study for Models A-F",
                         argument_default=argparse.SUPPRESS)
    sim.add_argument("--model", choices=list(simulation.MODELS))
    sim.add_argument("--n", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--methods", help="comma list from KRR,BSpline,Linear")
    sim.add_argument("--gcv", choices=list(krr.GCV_VARIANTS))
    sim.add_argument("--lambda-grid")
    sim.add_argument("--levels")
    sim.add_argument("--knots", type=int, help="interior knots per coordinate for B-splines")
    _add_kernel_options(sim)

    rat = sub.add_parser("ratio", help="estimate inverse response probabilities",
                         argument_default=argparse.SUPPRESS)
    rat.add_argument("--input")
    rat.add_argument("--delta", help="name of the 0/1 response indicator column")
    rat.add_argument("--covariates")
    rat.add_argument("--c-min", type=float)
    _add_kernel_options(rat)
    return parser


def resolve_options(parser, argv) -> argparse.Namespace:
    """Defaults, then config file, then explicit flags."""
    ns = parser.parse_args(argv)
    merged = dict(DEFAULTS[ns.command])
    if getattr(ns, "config", None):
        try:
            conf = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {ns.config}: {exc}")
        if not isinstance(conf, dict):
            parser.error("config file must hold a JSON object")
        merged.update({k.replace("-", "_"): v for k, v in conf.items()})
    merged.update(vars(ns))
    for key in REQUIRED[ns.command]:
        if merged.get(key) is None:
            parser.error(f"--{key.replace('_', '-')} is required")
    return argparse.Namespace(**merged)


def parse_grid(text, default=None):
    if text is None or (isinstance(text, str) and text == "auto"):
        return default
    if isinstance(text, (list, tuple)):
        values = np.array(text, dtype=float)
    elif ":" in text:
        lo, hi, num = text.split(":")
        values = np.geomspace(float(lo), float(hi), int(num))
    else:
        values = np.array([float(v) for v in text.split(",") if v.strip()])
    if values.size == 0 or np.any(~np.isfinite(values)) or np.any(values <= 0):
        raise InvalidInput(f"grid must be non-empty and positive: {text!r}")
    return values


def parse_levels(text):
    levels = [float(v) for v in (text.split(",") if isinstance(text, str) else text)]
    if not levels or any(not 0 < lv < 1 for lv in levels):
        raise InvalidInput("confidence levels must lie in (0, 1)")
    return tuple(levels)


def kernel_from(opts) -> KernelSpec:
    return KernelSpec(family=opts.kernel, order=int(opts.order), bandwidth=opts.bandwidth)


def read_csv(path):
    """Header and rows of a comma-separated UTF-8 file."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise MalformedCsv(f"cannot read {path}: {exc}") from exc
    if not rows or not rows[0]:
        raise MalformedCsv("missing header row")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise MalformedCsv(f"line {i}: expected {len(header)} fields, got {len(r)}")
    if len(set(header)) != len(header):
        raise MalformedCsv("duplicate column names")
    return header, body


def _column(header, name):
    if name not in header:
        raise MalformedCsv(f"column {name!r} not found")
    return header.index(name)


def _numeric(cell, where):
    try:
        return float(cell)
    except ValueError as exc:
        raise MalformedCsv(f"{where}: not a number: {cell!r}") from exc


def covariate_matrix(header, body, exclude, covariates=None):
    names = [c.strip() for c in covariates.split(",")] if covariates else [h for h in header if h not in exclude]
    if not names:
        raise MalformedCsv("no covariate columns")
    idx = [_column(header, c) for c in names]
    X = np.empty((len(body), len(idx)))
    for i, row in enumerate(body):
        for j, k in enumerate(idx):
            cell = row[k].strip()
            if cell == "":
                raise MissingInCovariates(f"row {i + 1}: covariate {names[j]!r} is missing")
            X[i, j] = _numeric(cell, f"row {i + 1}, column {names[j]!r}")
    return names, X


def read_response_data(path, response, covariates=None):
    header, body = read_csv(path)
    k = _column(header, response)
    _, X = covariate_matrix(header, body, {response}, covariates)
    y = np.full(len(body), np.nan)
    for i, row in enumerate(body):
        cell = row[k].strip()
        if cell != "":
            y[i] = _numeric(cell, f"row {i + 1}, column {response!r}")
    if len(body) < 2:
        raise MalformedCsv("need at least two data rows")
    delta = (~np.isnan(y)).astype(int)
    if delta.sum() == 0:
        raise AllMissing(f"every value of {response!r} is missing")
    return header, body, krr.LabeledSample(X, y, delta)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_impute(opts) -> int:
    header, body, sample = read_response_data(opts.input, opts.response, opts.covariates)
    spec = kernel_from(opts)
    levels = parse_levels(opts.levels)
    report = estimate_mean(
        sample, spec, lambda_grid=parse_grid(opts.lambda_grid), gcv_variant=opts.gcv,
        tau_grid=parse_grid(opts.tau_grid), n_folds=int(opts.folds), seed=int(opts.seed),
        levels=levels, c_min=float(opts.c_min),
    )
    m_hat = report.krr_model.predict(sample.X)
    completed = np.where(sample.responders, sample.y, m_hat)

    y_obs = sample.y[sample.responders]
    cc_theta = float(y_obs.mean())
    cc_var = float(y_obs.var(ddof=1) / y_obs.size) if y_obs.size > 1 else float("nan")
    cc_ci = {lv: confidence_interval(cc_theta, cc_var, lv) if cc_var == cc_var else (math.nan, math.nan)
             for lv in levels}

    out = Path(opts.output)
    out.mkdir(parents=True, exist_ok=True)
    k = header.index(opts.response)
    rows = []
    for row, value, d in zip(body, completed, sample.delta):
        row = list(row)
        row[k] = repr(float(value))
        rows.append(row + [str(1 - int(d))])
    _write_csv(out / "imputed.csv", header + ["imputed"], rows)

    payload = report.to_dict()
    payload["complete_case"] = {"theta_hat": cc_theta, "std_error": math.sqrt(cc_var) if cc_var == cc_var else None,
                                "ci": {f"{lv:g}": list(b) for lv, b in cc_ci.items()}}
    payload["input"] = {"path": str(opts.input), "response": opts.response}
    _write_json(out / "report.json", payload)

    label = "Sobolev" if spec.family == "sobolev" else "Gaussian"
    table = [["Estimator", "I.E.", "S.E."] + [f"{lv:.0%} C.I." for lv in levels]]
    table.append(["Complete", f"{cc_theta:.4f}", f"{math.sqrt(cc_var):.4f}" if cc_var == cc_var else "nan"]
                 + [f"({lo:.4f}, {hi:.4f})" for lo, hi in cc_ci.values()])
    table.append([label, f"{report.theta_hat:.4f}", f"{report.std_error:.4f}"]
                 + [f"({lo:.4f}, {hi:.4f})" for lo, hi in report.ci.values()])
    _write_csv(out / "table.csv", table[0], table[1:])
    print(f"theta_hat = {report.theta_hat:.6g}  (S.E. {report.std_error:.4g}; n={sample.n}, missing={sample.n0})")
    return 0


def cmd_simulate(opts) -> int:
    methods = tuple(m.strip() for m in opts.methods.split(",")) if isinstance(opts.methods, str) else tuple(opts.methods)
    tau_grid = simulation.SIM_TAU_GRID if opts.tau_grid == "sim" else parse_grid(opts.tau_grid)
    if tau_grid is None:
        tau_grid = density_ratio.default_tau_grid()
    lam_grid = parse_grid(opts.lambda_grid)
    config = simulation.SimConfig(
        model=opts.model, n=int(opts.n), replications=int(opts.reps), seed=int(opts.seed),
        methods=methods, kernel=kernel_from(opts),
        lambda_grid=None if lam_grid is None else tuple(float(v) for v in lam_grid),
        tau_grid=tuple(float(v) for v in tau_grid), n_folds=int(opts.folds), gcv_variant=opts.gcv,
        levels=parse_levels(opts.levels), knots=int(opts.knots),
    )
    workers = int(opts.threads) if opts.threads else (os.cpu_count() or 1)
    report = simulation.run_mc(config, workers=workers)
    paths = simulation.write_outputs(report, opts.output)
    for row in report.table_rows():
        print(",".join(str(c) for c in row))
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_ratio(opts) -> int:
    header, body = read_csv(opts.input)
    k = _column(header, opts.delta)
    _, X = covariate_matrix(header, body, {opts.delta}, opts.covariates)
    delta = np.array([_numeric(row[k].strip(), f"row {i + 1}, column {opts.delta!r}")
                      for i, row in enumerate(body)])
    if not np.all(np.isin(delta, (0, 1))):
        raise MalformedCsv(f"column {opts.delta!r} must be 0/1")
    sample = krr.LabeledSample(X, np.zeros(len(body)), delta.astype(int))
    spec = kernel_from(opts)
    if sample.n0 == 0:
        warnings.warn("no missing rows; all weights are 1", NoMissingRowsWarning, stacklevel=1)
    model, sel = density_ratio.estimate_weights(sample, spec, parse_grid(opts.tau_grid),
                                                int(opts.folds), int(opts.seed))
    w = density_ratio.omega(model, X)
    max_w = density_ratio.check_weight_bound(w, float(opts.c_min))

    out = Path(opts.output)
    out.mkdir(parents=True, exist_ok=True)
    rows = [list(row) + [repr(float(wi)), repr(float(1.0 / wi))] for row, wi in zip(body, w)]
    _write_csv(out / "weights.csv", header + ["omega", "p_hat"], rows)
    payload = {
        "n": sample.n, "n1": sample.n1, "n0": sample.n0,
        "tau": None if sel is None else sel.tau,
        "cv": None if sel is None else {"tau_grid": sel.grid.tolist(), "scores": [None if math.isnan(v) else v for v in sel.scores.tolist()],
                                     "folds": sel.n_folds},
        "alpha0": model.alpha0, "max_omega": max_w, "converged": model.converged,
        "kernel": model.spec.summary(),
    }
    _write_json(out / "report.json", payload)
    print(f"tau = {payload['tau']}  max omega = {max_w:.4g}")
    return 0


COMMANDS = {"impute": cmd_impute, "simulate": cmd_simulate, "ratio": cmd_ratio}


def main(argv=None) -> int:
    parser = build_parser()
    opts = resolve_options(parser, argv)
    logging.basicConfig(level=logging.INFO if getattr(opts, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        if opts.command == "simulate" or not opts.threads:
            return COMMANDS[opts.command](opts)
        with threadpool_limits(int(opts.threads)):
            return COMMANDS[opts.command](opts)
    except (KrrImputeError, ValueError) as exc:
        print(f"krr-impute: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
