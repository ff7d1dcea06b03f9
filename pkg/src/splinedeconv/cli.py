"""Command-line interface.

Every subcommand accepts ``--config file.json`` whose keys are the long
option names (with underscores); flags given on the command line win.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 fit
non-convergence, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .dataio import DataError, IngestTransform, emit, ingest, write_table_csv
from .deconv_baseline import KernelSpec, deconv_density, deconv_regression, naive_kernel
from .density_mle import DensityFitOptions, fit_density
from .error_models import ErrorLaw, parse_law
from .semipar_regression import (
    DEFAULT_WORKING_POINTS,
    DegenerateDataError,
    RegressionFitOptions,
    SingularSystemError,
    WorkingDensity,
    default_working_density,
    fit_regression,
)
from .sim_harness import (
    MODELS,
    MethodConfig,
    RunFailure,
    SimDesign,
    bootstrap_bands,
    bspline_estimator,
    run_rate_curve,
    run_table1,
)
from .spline_core import KNOT_CONVENTIONS, KnotVector, knot_rule, make_knots

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONCONVERGED, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("splinedeconv")


class ConfigError(ValueError):
    pass


class NotConverged(RuntimeError):
    pass


# ---------------------------------------------------------------- converters


def _positive_int(minimum: int = 1) -> Callable[[Any], int]:
    def conv(v):
        if isinstance(v, bool):
            raise ValueError("expected an integer")
        if isinstance(v, float) and not v.is_integer():
            raise ValueError("expected an integer")
        i = int(v)
        if i < minimum:
            raise ValueError(f"must be >= {minimum}")
        return i

    return conv


def _positive_float(v) -> float:
    f = float(v)
    if not (f > 0 and math.isfinite(f)):
        raise ValueError("must be a positive finite number")
    return f


def _finite_float(v) -> float:
    f = float(v)
    if not math.isfinite(f):
        raise ValueError("must be finite")
    return f


def _unit_open(v) -> float:
    f = float(v)
    if not 0.0 < f < 1.0:
        raise ValueError("must lie strictly between 0 and 1")
    return f


def _choice(*options: str) -> Callable[[Any], str]:
    def conv(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v

    return conv


def _law(v) -> str:
    if v == "normal:auto":
        return v
    return parse_law(v).spec()


def _knots(v):
    if v == "auto":
        return v
    return _positive_int(0)(v)


def _working(v):
    if v == "auto":
        return v
    if isinstance(v, str) and v.upper().startswith("L="):
        v = v[2:]
    return _positive_int(1)(v)


def _n_list(v) -> list[int]:
    items = v.split(",") if isinstance(v, str) else list(v)
    out = [_positive_int(1)(x) for x in items]
    if not out or any(b <= a for a, b in zip(out, out[1:])):
        raise ValueError("must be a strictly increasing list of sample sizes")
    return out


def _path(v) -> str:
    if not isinstance(v, str) or not v:
        raise ValueError("must be a nonempty path string")
    return v


@dataclass(frozen=True)
class Option:
    name: str
    conv: Callable[[Any], Any]
    default: Any
    help: str


OPTIONS = {
    o.name: o
    for o in [
        Option("input", _path, None, "input CSV (columns w or w1..wK, optional y and w0)"),
        Option("out", _path, None, "output path (.json or .csv)"),
        Option("format", _choice("json", "csv"), None, "output format (default from the extension)"),
        Option("error", _law, None, "measurement error law, e.g. normal:0.0025, laplace:0.035, uniform:0.125"),
        Option("noise", _law, "normal:0.25", "regression noise law (normal)"),
        Option("order", _positive_int(1), 4, "spline order (4 = cubic)"),
        Option("knots", _knots, "auto", "'auto' or the number of interior knots"),
        Option("knot_convention", _choice(*KNOT_CONVENTIONS), "basis", "how 'auto' reads the knot count"),
        Option("working", _working, "auto", "working density size: 'auto' (25 points) or L"),
        Option("working_shape", _choice("uniform", "triangular"), "uniform", "working density weights"),
        Option("grid", _positive_int(2), 201, "number of output grid points on [0, 1]"),
        Option("lo", _finite_float, 0.0, "lower end of the rescaling range"),
        Option("hi", _finite_float, 1.0, "upper end of the rescaling range"),
        Option("method", str, None, "estimator"),
        Option("bandwidth", _positive_float, None, "kernel bandwidth"),
        Option("task", _choice("density", "regression"), None, "simulation task"),
        Option("model", _choice(*MODELS), None, "error model id"),
        Option("n", _positive_int(1), None, "sample size"),
        Option("n_list", _n_list, "500,1000,2000", "comma-separated increasing sample sizes"),
        Option("replicates", _positive_int(0), 200, "Monte Carlo replicates"),
        Option("seed", _positive_int(0), 0, "random seed"),
        Option("boot", _positive_int(2), 100, "bootstrap resamples"),
        Option("level", _unit_open, 0.95, "band coverage level"),
        Option("workers", _positive_int(1), None, "worker processes (capped by SPLINEDECONV_THREADS)"),
    ]
}

SUBCOMMANDS: dict[str, tuple[str, list[str], list[str]]] = {
    # name: (help, required, optional)
    "estimate-density": (
        "spline maximum-likelihood density of the error-free covariate",
        ["input", "error"],
        ["out", "format", "order", "knots", "knot_convention", "grid", "lo", "hi"],
    ),
    "estimate-regression": (
        "semiparametric spline regression with an error-prone covariate",
        ["input", "error"],
        ["out", "format", "noise", "order", "knots", "knot_convention", "working", "working_shape", "grid", "lo", "hi"],
    ),
    "baseline": (
        "deconvoluting-kernel or error-ignoring kernel estimators",
        ["input", "method", "bandwidth"],
        ["error", "out", "format", "grid", "lo", "hi"],
    ),
    "simulate": (
        "Monte Carlo sup-error table for one design cell",
        ["task", "model", "n"],
        ["replicates", "seed", "method", "bandwidth", "knot_convention", "working", "workers", "out"],
    ),
    "rate-curve": (
        "sqrt(n h_b)-scaled mean sup-error across sample sizes",
        ["task", "model"],
        ["n_list", "replicates", "seed", "method", "bandwidth", "knot_convention", "working", "workers", "out"],
    ),
    "bootstrap": (
        "spline estimate with pointwise bootstrap bands",
        ["input", "task", "error"],
        ["out", "noise", "order", "knots", "knot_convention", "working", "working_shape", "grid", "lo", "hi",
         "boot", "level", "seed"],
    ),
    "ingest-check": (
        "validate and summarise an input file",
        ["input"],
        ["lo", "hi", "out"],
    ),
}

METHOD_CHOICES = {
    "baseline": ("deconv-density", "deconv-reg", "naive", "naive-reg"),
    "simulate": ("bspline", "deconv", "naive"),
    "rate-curve": ("bspline", "deconv", "naive"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splinedeconv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, required, optional) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config; flags override its values")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        for key in required + optional:
            opt = OPTIONS[key]
            extra = " (required)" if key in required else ""
            if opt.default is not None:
                extra += f" [default: {opt.default}]"
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=opt.help + extra)
    return parser


def resolve(command: str, flags: dict) -> dict:
    """Merge defaults < config file < flags, validating every value."""
    _, required, optional = SUBCOMMANDS[command]
    allowed = required + optional
    merged: dict[str, Any] = {}
    cfg_path = flags.get("config")
    if cfg_path:
        try:
            cfg = json.loads(Path(cfg_path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {cfg_path}: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {cfg_path} is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError(f"config {cfg_path} must hold a JSON object")
        for key, value in cfg.items():
            norm = key.replace("-", "_")
            if norm not in allowed:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            merged[norm] = value
    for key in allowed:
        if flags.get(key) is not None:
            merged[key] = flags[key]
    out = {}
    for key in allowed:
        opt = OPTIONS[key]
        if key in merged and merged[key] is not None:
            try:
                out[key] = opt.conv(merged[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid value for {key!r}: {merged[key]!r} ({exc})") from None
        elif key in required:
            raise ConfigError(f"missing required setting {key!r}")
        else:
            out[key] = None if opt.default is None else opt.conv(opt.default)
    if command in METHOD_CHOICES:
        choices = METHOD_CHOICES[command]
        if out.get("method") is None:
            out["method"] = choices[0]
        if out["method"] not in choices:
            raise ConfigError(f"invalid value for 'method': {out['method']!r} (must be one of {', '.join(choices)})")
    if "hi" in out and out["hi"] <= out["lo"]:
        raise ConfigError(f"'hi' ({out['hi']}) must exceed 'lo' ({out['lo']})")
    return out


# ---------------------------------------------------------------- helpers


def _knot_vector(cfg: dict, n: int) -> KnotVector:
    if cfg["knots"] == "auto":
        return knot_rule(n, cfg["knot_convention"], cfg["order"])
    return make_knots(cfg["knots"], cfg["order"])


def _error_law(cfg: dict, data) -> ErrorLaw:
    if cfg["error"] == "normal:auto":
        if data.mean_error_var is None:
            raise ConfigError("'normal:auto' needs a w0 reference column to estimate the error variance")
        return ErrorLaw("normal", data.mean_error_var)
    return parse_law(cfg["error"])


def _working_density(cfg: dict, kv: KnotVector) -> WorkingDensity:
    if cfg["working"] == "auto":
        if cfg["working_shape"] == "uniform":
            return default_working_density(kv)
        return WorkingDensity.triangular(DEFAULT_WORKING_POINTS)
    make = WorkingDensity.uniform if cfg["working_shape"] == "uniform" else WorkingDensity.triangular
    return make(cfg["working"])


def _load(cfg: dict):
    return ingest(cfg["input"], IngestTransform(cfg["lo"], cfg["hi"]))


def _require_y(data, what: str):
    if data.y is None:
        raise DataError(f"{what} needs a 'y' column")
    return data.y


def _curve_output(cfg, x_unit, values, transform, density: bool, extra: dict, lo=None, hi=None):
    back = transform.density_back if density else transform.regression_back
    x, est = back(x_unit, values)
    band_lo = None if lo is None else back(x_unit, lo)[1]
    band_hi = None if hi is None else back(x_unit, hi)[1]
    doc = {**extra, "x": x, "estimate": est, "band_lo": band_lo, "band_hi": band_hi, "transform": transform.to_dict()}
    if cfg.get("out"):
        emit(doc, cfg["out"], cfg.get("format"))
    return doc


def _print(doc: dict) -> None:
    print(json.dumps({k: v for k, v in doc.items() if not isinstance(v, (list, np.ndarray))}, default=str))


# ---------------------------------------------------------------- commands


def cmd_estimate_density(cfg: dict) -> int:
    data = _load(cfg)
    law = _error_law(cfg, data)
    kv = _knot_vector(cfg, data.w.size)
    fit = fit_density(kv, law, data.w, DensityFitOptions())
    grid = np.linspace(0.0, 1.0, cfg["grid"])
    f = fit.model.pdf(grid)
    extra = {**fit.to_dict(), "error": law.spec(), "grid_x": grid, "grid_f": f}
    _curve_output(cfg, grid, f, data.transform, True, extra)
    _print({k: v for k, v in extra.items() if k in ("loglik", "grad_norm", "iterations", "converged", "n_obs")})
    if not fit.converged:
        raise NotConverged(f"density fit did not converge (gradient norm {fit.grad_norm:.3g})")
    return EXIT_OK


def cmd_estimate_regression(cfg: dict) -> int:
    data = _load(cfg)
    y = _require_y(data, "estimate-regression")
    law = _error_law(cfg, data)
    noise = parse_law(cfg["noise"])
    kv = _knot_vector(cfg, data.w.size)
    work = _working_density(cfg, kv)
    fit = fit_regression(kv, noise, law, work, data.w, y, RegressionFitOptions())
    grid = np.linspace(0.0, 1.0, cfg["grid"])
    m = fit.model.predict(grid)
    extra = {**fit.to_dict(), "error": law.spec(), "noise": noise.spec(), "working": work.to_dict(),
             "grid_x": grid, "grid_m": m}
    _curve_output(cfg, grid, m, data.transform, False, extra)
    _print({k: v for k, v in extra.items() if k in ("eq_norm", "newton_iters", "converged", "excluded_obs", "n_obs")})
    if not fit.converged:
        raise NotConverged(f"regression fit did not converge (|U| = {fit.eq_norm:.3g})")
    return EXIT_OK


def cmd_baseline(cfg: dict) -> int:
    data = _load(cfg)
    grid = np.linspace(0.0, 1.0, cfg["grid"])
    h = cfg["bandwidth"]
    method = cfg["method"]
    if method.startswith("deconv"):
        if cfg["error"] is None:
            raise ConfigError(f"method {method!r} needs an 'error' law")
        spec = KernelSpec(h, _error_law(cfg, data))
        if method == "deconv-density":
            est, density = deconv_density(data.w, spec, grid), True
        else:
            est, density = deconv_regression(data.w, _require_y(data, method), spec, grid), False
    elif method == "naive":
        est, density = naive_kernel(data.w, h, grid), True
    else:
        est, density = naive_kernel(data.w, h, grid, _require_y(data, method)), False
    _curve_output(cfg, grid, est, data.transform, density, {"method": method, "bandwidth": h})
    _print({"method": method, "bandwidth": h, "masked_points": int(np.count_nonzero(np.isnan(est)))})
    return EXIT_OK


def _method_config(cfg: dict) -> MethodConfig:
    wp = None if cfg.get("working") in (None, "auto") else cfg["working"]
    return MethodConfig(cfg["method"], cfg.get("bandwidth"), wp)


def cmd_simulate(cfg: dict) -> int:
    design = SimDesign(cfg["task"], cfg["model"], cfg["n"], cfg["replicates"], cfg["seed"], cfg["knot_convention"])
    try:
        report = run_table1(design, _method_config(cfg), cfg["workers"])
        status = EXIT_OK
    except RunFailure as exc:
        report, status = exc.report, EXIT_NONCONVERGED
        log.error("%s", exc)
    if cfg.get("out"):
        header = ("task", "model", "method", "n", "seed", "replicate", "sup_mae")
        rows = [
            (design.task, design.model, report.method.method, str(design.n), str(design.seed), str(r), e)
            for r, e in enumerate(report.errors)
        ]
        write_table_csv(cfg["out"], header, rows)
    _print(report.summary())
    return status


def cmd_rate_curve(cfg: dict) -> int:
    try:
        points = run_rate_curve(
            cfg["task"], cfg["model"], cfg["n_list"], cfg["replicates"], cfg["seed"], _method_config(cfg),
            cfg["knot_convention"], cfg["workers"],
        )
    except RunFailure as exc:
        log.error("%s", exc)
        return EXIT_NONCONVERGED
    if cfg.get("out"):
        header = ("n", "h_b", "mean_mae", "scaled_mae", "scaled_se", "failures")
        write_table_csv(
            cfg["out"], header,
            [(str(p.n), p.h_b, p.mean_mae, p.scaled_mae, p.scaled_se, str(p.failures)) for p in points],
        )
    for p in points:
        _print(p.__dict__)
    return EXIT_OK


def cmd_bootstrap(cfg: dict) -> int:
    data = _load(cfg)
    law = _error_law(cfg, data)
    kv = _knot_vector(cfg, data.w.size)
    density = cfg["task"] == "density"
    if density:
        est = bspline_estimator("density", law, kv)
        y = None
    else:
        y = _require_y(data, "regression bootstrap")
        est = bspline_estimator("regression", law, kv, _working_density(cfg, kv), parse_law(cfg["noise"]))
    grid = np.linspace(0.0, 1.0, cfg["grid"])
    try:
        bands = bootstrap_bands(data.w, est, cfg["boot"], cfg["level"], cfg["seed"], y=y, grid=grid)
    except RunFailure as exc:
        raise NotConverged(str(exc)) from exc
    extra = {"task": cfg["task"], "error": law.spec(), "boot": cfg["boot"], "level": cfg["level"],
             "failures": bands.failures}
    _curve_output(cfg, grid, bands.estimate, data.transform, density, extra, bands.lower, bands.upper)
    _print(extra)
    return EXIT_OK


def cmd_ingest_check(cfg: dict) -> int:
    data = _load(cfg)
    summary = data.summary()
    if cfg.get("out"):
        emit(summary, cfg["out"], "json")
    print(json.dumps(summary))
    return EXIT_OK


COMMANDS = {
    "estimate-density": cmd_estimate_density,
    "estimate-regression": cmd_estimate_regression,
    "baseline": cmd_baseline,
    "simulate": cmd_simulate,
    "rate-curve": cmd_rate_curve,
    "bootstrap": cmd_bootstrap,
    "ingest-check": cmd_ingest_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with 2 already
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = resolve(args.command, vars(args))
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DegenerateDataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NotConverged as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (SingularSystemError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # model-level validation (e.g. data incompatible with the error law)
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
