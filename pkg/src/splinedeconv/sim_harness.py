"""Monte Carlo harness: seeded data generation, replicate fits and error metrics.

Every random draw comes from a stream keyed by ``(seed, replicate, role)``,
so results do not depend on the order in which replicates are executed.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .deconv_baseline import KernelSpec, deconv_density, deconv_regression, naive_kernel, reference_bandwidth
from .density_mle import DensityFitOptions, fit_density
from .error_models import ErrorLaw, normal_noise
from .semipar_regression import (
    RegressionFitOptions,
    WorkingDensity,
    default_working_density,
    fit_regression,
)
from .spline_core import KnotVector, knot_rule

log = logging.getLogger(__name__)

MODELS: dict[str, ErrorLaw] = {
    "I.a": ErrorLaw("normal", 0.25),
    "I.b": ErrorLaw("laplace", 0.5 / math.sqrt(2.0)),
    "I.c": ErrorLaw("uniform", math.sqrt(0.75)),
    "II.a": ErrorLaw("normal", 0.0025),
    "II.b": ErrorLaw("laplace", 0.05 / math.sqrt(2.0)),
    "II.c": ErrorLaw("uniform", 0.125),
}
REGRESSION_NOISE = normal_noise(0.25)
TASK_SHAPE = {"density": 4.0, "regression": 2.0}
METHODS = ("bspline", "deconv", "naive")
GRID_POINTS = 201
MAX_FAILURE_FRAC = 0.05
MAX_BOOT_FAILURE_FRAC = 0.10

# stream roles
ROLE_X, ROLE_U, ROLE_EPS, ROLE_BOOT = 0, 1, 2, 3


def metric_grid() -> np.ndarray:
    return np.linspace(0.0, 1.0, GRID_POINTS)


def true_regression(x):
    return np.sin(2.0 * np.pi * np.asarray(x, dtype=float))


class RunFailure(RuntimeError):
    """Too many replicate (or bootstrap) fits failed."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


def stream(seed: int, replicate: int, role: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, replicate, role]))


@dataclass(frozen=True)
class SimDesign:
    task: str
    model: str
    n: int
    replicates: int = 200
    seed: int = 0
    knot_convention: str = "basis"

    def __post_init__(self) -> None:
        if self.task not in TASK_SHAPE:
            raise ValueError(f"task must be one of {sorted(TASK_SHAPE)}, got {self.task!r}")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {sorted(MODELS)}, got {self.model!r}")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.replicates < 0:
            raise ValueError("replicates must be >= 0")

    @property
    def law(self) -> ErrorLaw:
        return MODELS[self.model]

    @property
    def shape(self) -> float:
        return TASK_SHAPE[self.task]

    @property
    def knots(self) -> KnotVector:
        return knot_rule(self.n, self.knot_convention)

    def true_curve(self, x) -> np.ndarray:
        if self.task == "density":
            return stats.beta.pdf(x, self.shape, self.shape)
        return true_regression(x)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "model": self.model,
            "error_law": self.law.spec(),
            "n": self.n,
            "replicates": self.replicates,
            "seed": self.seed,
            "knot_convention": self.knot_convention,
        }


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    eps: np.ndarray | None = None
    y: np.ndarray | None = None


def generate(design: SimDesign, replicate: int, truth: Callable | None = None) -> Dataset:
    """Draw replicate ``replicate`` of the design; ``truth`` overrides the regression function."""
    if not 0 <= replicate < max(design.replicates, 1):
        raise ValueError(f"replicate {replicate} out of range for {design.replicates} replicates")
    x = stream(design.seed, replicate, ROLE_X).beta(design.shape, design.shape, design.n)
    u = design.law.sample(stream(design.seed, replicate, ROLE_U), design.n)
    w = x + u
    if design.task == "density":
        return Dataset(x, u, w)
    eps = REGRESSION_NOISE.sample(stream(design.seed, replicate, ROLE_EPS), design.n)
    m = truth if truth is not None else true_regression
    return Dataset(x, u, w, eps, m(x) + eps)


@dataclass(frozen=True)
class MethodConfig:
    """Estimator choice for a simulation cell; ``bandwidth`` None means the normal-reference rule."""

    method: str = "bspline"
    bandwidth: float | None = None
    working_points: int | None = None
    working_layout: str = "midpoint"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.working_points is not None and self.working_points < 1:
            raise ValueError("working_points must be >= 1")
        if self.working_layout not in ("midpoint", "closed"):
            raise ValueError(f"working_layout must be 'midpoint' or 'closed', got {self.working_layout!r}")


def estimate_curve(design: SimDesign, method: MethodConfig, data: Dataset, grid: np.ndarray) -> np.ndarray:
    """Fit the chosen estimator to one dataset and evaluate it on ``grid``."""
    law = design.law
    if method.method == "bspline":
        kv = design.knots
        if design.task == "density":
            fit = fit_density(kv, law, data.w, DensityFitOptions())
            if not fit.converged:
                raise RuntimeError(f"density fit did not converge (grad norm {fit.grad_norm:.3g})")
            return fit.model.pdf(grid)
        work = (
            (WorkingDensity.uniform if method.working_layout == "midpoint" else WorkingDensity.closed)(
                method.working_points
            )
            if method.working_points is not None
            else default_working_density(kv)
        )
        fit = fit_regression(kv, REGRESSION_NOISE, law, work, data.w, data.y, RegressionFitOptions())
        if not fit.converged:
            raise RuntimeError(f"regression fit did not converge (|U| = {fit.eq_norm:.3g})")
        return fit.model.predict(grid)
    if method.method == "deconv":
        h = method.bandwidth or reference_bandwidth(data.w, law)
        spec = KernelSpec(h, law)
        if design.task == "density":
            return deconv_density(data.w, spec, grid)
        return deconv_regression(data.w, data.y, spec, grid)
    h = method.bandwidth or reference_bandwidth(data.w, None)
    return naive_kernel(data.w, h, grid, data.y if design.task == "regression" else None)


def _replicate_error(args) -> tuple[float, str]:
    design, method, replicate = args
    grid = metric_grid()
    try:
        est = estimate_curve(design, method, generate(design, replicate), grid)
    except Exception as exc:  # recorded per replicate, never fatal on its own
        return math.nan, f"{type(exc).__name__}: {exc}"
    err = np.abs(est - design.true_curve(grid))
    if not np.any(np.isfinite(err)):
        return math.nan, "estimate is undefined on the whole grid"
    # masked (NaN) comparator points carry no estimate and are skipped
    return float(np.nanmax(err)), ""


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get("SPLINEDECONV_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError as exc:
            raise ValueError(f"SPLINEDECONV_THREADS must be an integer, got {cap!r}") from exc
    return max(1, n)


def parallel_map(fn, items: list, workers: int | None = None) -> list:
    """Order-preserving map over a process pool (serial when one worker)."""
    n = min(worker_count(workers), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * n))))


@dataclass
class MetricReport:
    design: SimDesign
    method: MethodConfig
    errors: np.ndarray  # per-replicate sup error, NaN for failures
    messages: list[str] = field(default_factory=list, repr=False)

    @property
    def h_b(self) -> float:
        return self.design.knots.h_b

    @property
    def failures(self) -> int:
        return int(np.count_nonzero(np.isnan(self.errors)))

    @property
    def valid(self) -> np.ndarray:
        return self.errors[~np.isnan(self.errors)]

    @property
    def mean(self) -> float:
        v = self.valid
        return float(v.mean()) if v.size else math.nan

    @property
    def se(self) -> float:
        v = self.valid
        return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan

    @property
    def scale(self) -> float:
        return math.sqrt(self.design.n * self.h_b)

    @property
    def scaled_mean(self) -> float:
        return self.scale * self.mean

    @property
    def scaled_se(self) -> float:
        return self.scale * self.se

    def summary(self) -> dict:
        return {
            **self.design.to_dict(),
            "method": self.method.method,
            "h_b": self.h_b,
            "grid_points": GRID_POINTS,
            "mean_mae": self.mean,
            "mc_se": self.se,
            "scaled_mae": self.scaled_mean,
            "scaled_se": self.scaled_se,
            "failures": self.failures,
        }


def run_table1(
    design: SimDesign, method: MethodConfig | None = None, workers: int | None = None, strict: bool = True
) -> MetricReport:
    """Mean sup-error over the design's replicates for one estimator."""
    method = method or MethodConfig()
    jobs = [(design, method, r) for r in range(design.replicates)]
    results = parallel_map(_replicate_error, jobs, workers)
    report = MetricReport(
        design, method, np.array([r[0] for r in results], dtype=float), [r[1] for r in results]
    )
    for r, msg in enumerate(report.messages):
        if msg:
            log.warning("replicate %d failed: %s", r, msg)
    if strict and report.failures > MAX_FAILURE_FRAC * design.replicates:
        raise RunFailure(f"{report.failures} of {design.replicates} replicates failed", report)
    return report


@dataclass(frozen=True)
class RatePoint:
    n: int
    h_b: float
    mean_mae: float
    scaled_mae: float
    scaled_se: float
    failures: int


def run_rate_curve(
    task: str,
    model: str,
    n_list,
    replicates: int = 200,
    seed: int = 0,
    method: MethodConfig | None = None,
    knot_convention: str = "basis",
    workers: int | None = None,
) -> list[RatePoint]:
    """``sqrt(n h_b)`` times the mean sup-error for each sample size."""
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be strictly increasing")
    out = []
    for n in n_list:
        rep = run_table1(SimDesign(task, model, n, replicates, seed, knot_convention), method, workers)
        out.append(RatePoint(n, rep.h_b, rep.mean, rep.scaled_mean, rep.scaled_se, rep.failures))
    return out


def flatness_ratio(points: list[RatePoint]) -> float:
    vals = [p.scaled_mae for p in points]
    return max(vals) / min(vals)


@dataclass(frozen=True)
class Bands:
    grid: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    failures: int


def bootstrap_bands(
    w,
    estimator: Callable,
    B: int = 100,
    level: float = 0.9,
    seed: int = 0,
    y=None,
    grid=None,
) -> Bands:
    """Pointwise percentile bands from resampling observations (pairs when ``y`` is given).

    ``estimator(w, y, grid)`` returns the curve on ``grid`` (``y`` is None for
    density estimation).
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    w = np.asarray(w, dtype=float).ravel()
    y = None if y is None else np.asarray(y, dtype=float).ravel()
    grid = metric_grid() if grid is None else np.asarray(grid, dtype=float)
    estimate = np.asarray(estimator(w, y, grid), dtype=float)
    rng = stream(seed, 0, ROLE_BOOT)
    curves, failures = [], 0
    for _ in range(B):
        idx = rng.integers(0, w.size, w.size)
        try:
            curves.append(np.asarray(estimator(w[idx], None if y is None else y[idx], grid), dtype=float))
        except Exception as exc:
            failures += 1
            log.warning("bootstrap fit failed: %s", exc)
    if failures > MAX_BOOT_FAILURE_FRAC * B:
        raise RunFailure(f"{failures} of {B} bootstrap fits failed")
    stack = np.vstack(curves)
    alpha = 0.5 * (1.0 - level)
    lower = np.quantile(stack, alpha, axis=0, method="inverted_cdf")
    upper = np.quantile(stack, 1.0 - alpha, axis=0, method="inverted_cdf")
    return Bands(grid, estimate, lower, upper, level, failures)


def bspline_estimator(
    task: str,
    law: ErrorLaw,
    kv: KnotVector,
    work: WorkingDensity | None = None,
    noise: ErrorLaw = REGRESSION_NOISE,
):
    """Estimator callable for ``bootstrap_bands`` using the spline fits."""
    if task == "density":

        def est(w, y, grid):
            return fit_density(kv, law, w).model.pdf(grid)

    else:
        work = work or default_working_density(kv)

        def est(w, y, grid):
            return fit_regression(kv, noise, law, work, w, y).model.predict(grid)

    return est


@dataclass(frozen=True)
class WitnessResult:
    mean: np.ndarray
    se: np.ndarray
    datasets: int

    @property
    def z(self) -> np.ndarray:
        return self.mean / self.se


def mean_zero_witness(
    model: str = "II.a",
    n: int = 2000,
    datasets: int = 200,
    seed: int = 0,
    kv: KnotVector | None = None,
    work: WorkingDensity | None = None,
    beta0=None,
) -> WitnessResult:
    """Mean and Monte Carlo SE of the corrected estimating function at the true beta.

    The regression function is the spline ``B(x) @ beta0`` so that beta0 is
    exactly the true parameter.  Default beta0 is the least-squares spline
    projection of ``sin(2 pi x)``.
    """
    from .semipar_regression import RegressionEquation, RegressionModel
    from .spline_core import basis_matrix

    design = SimDesign("regression", model, n, datasets, seed)
    kv = kv or design.knots
    work = work or default_working_density(kv)
    if beta0 is None:
        xs = np.linspace(0.0, 1.0, 401)
        beta0, *_ = np.linalg.lstsq(basis_matrix(kv, xs), true_regression(xs), rcond=None)
    beta0 = np.asarray(beta0, dtype=float)
    truth = RegressionModel(kv, beta0).predict
    vals = []
    for r in range(datasets):
        data = generate(design, r, truth=truth)
        eq = RegressionEquation(kv, REGRESSION_NOISE, design.law, work, data.w, data.y)
        vals.append(eq.evaluate(beta0)[0])
    vals = np.array(vals)
    return WitnessResult(vals.mean(axis=0), vals.std(axis=0, ddof=1) / math.sqrt(datasets), datasets)


__all__ = [
    "MODELS",
    "REGRESSION_NOISE",
    "SimDesign",
    "Dataset",
    "MethodConfig",
    "MetricReport",
    "RatePoint",
    "Bands",
    "RunFailure",
    "generate",
    "estimate_curve",
    "run_table1",
    "run_rate_curve",
    "flatness_ratio",
    "bootstrap_bands",
    "bspline_estimator",
    "mean_zero_witness",
    "metric_grid",
]
