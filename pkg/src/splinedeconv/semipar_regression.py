"""Semiparametric spline regression with an error-prone covariate.

Model: ``Y = m(X) + eps`` with ``m(x) ~ B(x) @ beta``, observed covariate
``W = X + U``.  A discrete working density for X (support points ``x_j``
with weights ``c_j``) gives a working score for beta.  Because the working
density is generally wrong, the score is corrected by a function
``a(x, beta)`` that makes the estimating function conditionally mean zero
at every support point; ``a`` solves an L x L linear system whose entries
are double integrals over (y, w).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .error_models import ErrorLaw
from .quadrature import DEFAULT_PLANE_POINTS, DEFAULT_TAIL_SIGMAS, PlaneGrid, plane_grid
from .spline_core import KnotVector, basis_matrix

log = logging.getLogger(__name__)

DEGENERATE_FLOOR = 1e-300


class DegenerateDataError(RuntimeError):
    """Too many observations have a vanishing working-model likelihood."""


class SingularSystemError(RuntimeError):
    """The correction system could not be solved even after ridging."""


@dataclass(frozen=True)
class WorkingDensity:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=float).ravel()
        wts = np.array(self.weights, dtype=float).ravel()
        if pts.size == 0 or pts.shape != wts.shape:
            raise ValueError("working density needs matching, nonempty points and weights")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("working density points must be strictly increasing")
        if np.any(pts < 0) or np.any(pts > 1):
            raise ValueError("working density points must lie in [0, 1]")
        if np.any(wts < 0) or abs(wts.sum() - 1.0) > 1e-12:
            raise ValueError("working density weights must be nonnegative and sum to 1")
        pts.setflags(write=False)
        wts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)

    @property
    def size(self) -> int:
        return self.points.size

    @classmethod
    def uniform(cls, size: int) -> "WorkingDensity":
        """Equal weights on the midpoints ``(j - 0.5) / L``."""
        if size < 1:
            raise ValueError("working density needs at least one point")
        return cls((np.arange(1, size + 1) - 0.5) / size, np.full(size, 1.0 / size))

    @classmethod
    def closed(cls, size: int) -> "WorkingDensity":
        """Equal weights on ``L`` equally spaced points including both ends of [0, 1]."""
        if size < 2:
            raise ValueError("closed working grid needs at least two points")
        return cls(np.linspace(0.0, 1.0, size), np.full(size, 1.0 / size))

    @classmethod
    def triangular(cls, size: int) -> "WorkingDensity":
        """Midpoint grid with weights proportional to a triangle peaked at 1/2."""
        pts = (np.arange(1, size + 1) - 0.5) / size
        wts = 1.0 - np.abs(2.0 * pts - 1.0)
        return cls(pts, wts / wts.sum())

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "weights": self.weights.tolist()}


DEFAULT_WORKING_POINTS = 25


def default_working_density(kv: KnotVector | None = None) -> WorkingDensity:
    """Uniform working density on 25 midpoints (``kv`` is accepted for call-site symmetry).

    Coarser grids make the estimating function biased at the true beta;
    finer ones leave the correction system badly conditioned.
    """
    return WorkingDensity.uniform(DEFAULT_WORKING_POINTS)


@dataclass(frozen=True)
class RegressionModel:
    kv: KnotVector
    beta: np.ndarray

    def __post_init__(self) -> None:
        beta = np.array(self.beta, dtype=float)
        if beta.shape != (self.kv.basis_dim,):
            raise ValueError(f"beta must have length {self.kv.basis_dim}, got shape {beta.shape}")
        if not np.all(np.isfinite(beta)):
            raise ValueError("beta must be finite")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    def predict(self, x) -> np.ndarray:
        return basis_matrix(self.kv, x) @ self.beta


def eval_m(model: RegressionModel, x: float) -> float:
    return float(model.predict(np.array([x]))[0])


def _check_noise(noise: ErrorLaw) -> None:
    if noise.kind != "normal":
        raise ValueError("regression noise must be normal")


class _Posterior:
    """Working-model joint terms ``f_eps(y - m_j) f_U(w - x_j) c_j`` for a batch of (w, y)."""

    def __init__(self, model: RegressionModel, noise: ErrorLaw, law: ErrorLaw, work: WorkingDensity, w, y):
        w = np.atleast_1d(np.asarray(w, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        self.basis = basis_matrix(model.kv, work.points)
        m = self.basis @ model.beta
        resid = y[:, None] - m[None, :]
        fu = law.density(w[:, None] - work.points[None, :]) * work.weights[None, :]
        self.joint = noise.density(resid) * fu
        self.joint_deriv = noise.density_deriv(resid) * fu
        self.denom = self.joint.sum(axis=1)
        self.ok = self.denom >= DEGENERATE_FLOOR
        self.excluded = int(np.count_nonzero(~self.ok))

    def score(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            s = -(self.joint_deriv @ self.basis) / self.denom[:, None]
        s[~self.ok] = 0.0
        return s

    def expect(self, a: np.ndarray) -> np.ndarray:
        """Posterior mean of the columns of ``a`` (d x L) for each observation."""
        with np.errstate(invalid="ignore", divide="ignore"):
            e = (self.joint @ a.T) / self.denom[:, None]
        e[~self.ok] = 0.0
        return e


def score_sstar(model: RegressionModel, noise: ErrorLaw, law: ErrorLaw, work: WorkingDensity, w: float, y: float):
    """Working-model score for one observation; raises if the observation is degenerate."""
    _check_noise(noise)
    post = _Posterior(model, noise, law, work, w, y)
    if post.excluded:
        raise DegenerateDataError(f"working likelihood of (w={w}, y={y}) is below {DEGENERATE_FLOOR}")
    return post.score()[0]


def build_AH(
    model: RegressionModel, noise: ErrorLaw, law: ErrorLaw, work: WorkingDensity, grid: PlaneGrid
) -> tuple[np.ndarray, np.ndarray]:
    """Correction-system matrices by tensor quadrature on ``grid``.

    ``A[i, j]`` is the conditional mean, given ``X = x_i``, of the working
    posterior weight on ``x_j``; ``H[i, j]`` is the matching conditional mean
    of ``-f_eps'(Y - m_j) f_U(W - x_j) c_j / sum_k(...)``.  Both are L x L.
    """
    _check_noise(noise)
    if grid.y_nodes is None:
        raise ValueError("build_AH needs a grid with a y axis")
    m = basis_matrix(model.kv, work.points) @ model.beta
    ey = noise.density(grid.y_nodes[:, None] - m[None, :])  # (My, L)
    epy = noise.density_deriv(grid.y_nodes[:, None] - m[None, :])
    uw = law.density(grid.w_nodes[:, None] - work.points[None, :])  # (Mw, L)
    c = work.weights

    # G[a, b, i] = f_eps(y_a - m_i) f_U(w_b - x_i)
    G = ey[:, None, :] * uw[None, :, :]
    joint = G * c
    denom = joint.sum(axis=-1, keepdims=True)
    omega = (grid.y_weights[:, None] * grid.w_weights[None, :])[..., None]
    live = denom > 0
    # cells where every joint term underflows carry no mass: 0/0 := 0
    num_a = np.divide(joint, denom, out=np.zeros_like(joint), where=live) * omega
    num_h = np.divide(epy[:, None, :] * uw[None, :, :] * c, denom, out=np.zeros_like(joint), where=live) * omega
    L = work.size
    G2 = G.reshape(-1, L)
    A = G2.T @ num_a.reshape(-1, L)
    H = -(G2.T @ num_h.reshape(-1, L))
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(H))):
        bad = np.argwhere(~np.isfinite(num_a).all(axis=-1) | ~np.isfinite(num_h).all(axis=-1))
        cell = tuple(bad[0]) if bad.size else None
        where = f" at grid cell (y={grid.y_nodes[cell[0]]:.6g}, w={grid.w_nodes[cell[1]]:.6g})" if cell else ""
        raise FloatingPointError(f"non-finite entry in correction matrices{where}")
    return A, H


@dataclass
class CorrectionSolve:
    A: np.ndarray
    H: np.ndarray
    b: np.ndarray  # d x L right-hand side, column i = sum_j H[i, j] B(x_j)
    a: np.ndarray  # d x L, column j = a(x_j, beta)
    residual: float
    ridge: float = 0.0


def solve_correction(A, H, kv: KnotVector, work: WorkingDensity, cond_limit: float = 1e12) -> CorrectionSolve:
    """Solve ``a A^T = sum_j B(x_j) H_j`` for the correction values ``a``."""
    A = np.asarray(A, dtype=float)
    H = np.asarray(H, dtype=float)
    L = work.size
    if A.shape != (L, L) or H.shape != (L, L):
        raise ValueError(f"A and H must be {L} x {L}")
    basis = basis_matrix(kv, work.points)  # (L, d)
    b = basis.T @ H.T
    ridge = 0.0
    A_used = A
    if np.linalg.cond(A) > cond_limit:
        ridge = 1e-10 * np.trace(A) / L
        A_used = A + ridge * np.eye(L)
        log.info("correction system ill-conditioned; ridge %.3g added", ridge)
    try:
        a_t = np.linalg.solve(A_used, b.T)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"correction system is singular: {exc}") from exc
    a = a_t.T
    if not np.all(np.isfinite(a)):
        raise SingularSystemError("correction solve produced non-finite values")
    residual = float(np.max(np.abs(a @ A_used.T - b))) if a.size else 0.0
    return CorrectionSolve(A, H, b, a, residual, ridge)


def posterior_correction(
    solve: CorrectionSolve,
    model: RegressionModel,
    noise: ErrorLaw,
    law: ErrorLaw,
    work: WorkingDensity,
    w: float,
    y: float,
) -> np.ndarray:
    """Working-model posterior mean of ``a(X, beta)`` given one (w, y)."""
    post = _Posterior(model, noise, law, work, w, y)
    if post.excluded:
        raise DegenerateDataError(f"working likelihood of (w={w}, y={y}) is below {DEGENERATE_FLOOR}")
    return post.expect(solve.a)[0]


def estimating_terms(model, noise, law, work, solve: CorrectionSolve | None, w, y):
    """Per-observation estimating-function values and the degenerate mask.

    ``solve=None`` means no correction (the raw working score).
    """
    post = _Posterior(model, noise, law, work, w, y)
    terms = post.score()
    if solve is not None:
        terms = terms - post.expect(solve.a)
    return terms, post.ok


def estimating_equation(model, noise, law, work, solve: CorrectionSolve | None, w, y) -> np.ndarray:
    """Average corrected score over the non-degenerate observations."""
    _check_noise(noise)
    terms, ok = estimating_terms(model, noise, law, work, solve, w, y)
    if not ok.any():
        raise DegenerateDataError("every observation is degenerate under the working model")
    return terms[ok].mean(axis=0)


@dataclass
class RegressionFitOptions:
    tol: float = 1e-7
    max_iter: int = 100
    plane_points: int = DEFAULT_PLANE_POINTS
    tail_sigmas: float = DEFAULT_TAIL_SIGMAS
    fd_step: float = 1e-6
    max_excluded_frac: float = 0.01
    init: str = "working"  # "working": naive fit refined by the working MLE; "naive": least squares only


@dataclass
class RegressionFit:
    model: RegressionModel
    eq_norm: float
    iterations: int
    converged: bool
    excluded_obs: int
    n_obs: int
    max_residual: float
    ridge: float
    history: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "beta": self.model.beta.tolist(),
            "knots": self.model.kv.to_dict(),
            "eq_norm": self.eq_norm,
            "newton_iters": self.iterations,
            "converged": self.converged,
            "excluded_obs": self.excluded_obs,
            "n_obs": self.n_obs,
            "max_residual": self.max_residual,
            "ridge": self.ridge,
        }


def working_loglik(model: RegressionModel, noise: ErrorLaw, law: ErrorLaw, work: WorkingDensity, w, y):
    """Average working-model log-likelihood of (W, Y) and its gradient (the mean working score)."""
    post = _Posterior(model, noise, law, work, w, y)
    with np.errstate(divide="ignore"):
        ll = np.log(post.denom)
    return float(np.mean(ll)), post.score().mean(axis=0)


def working_mle(kv, noise, law, work, w, y, beta_start) -> np.ndarray:
    """Maximise the (misspecified) working likelihood; used only as a starting value."""

    def objective(beta):
        ll, grad = working_loglik(RegressionModel(kv, beta), noise, law, work, w, y)
        if not np.isfinite(ll):
            return np.inf, np.zeros_like(beta)
        return -ll, -grad

    res = optimize.minimize(objective, beta_start, jac=True, method="BFGS", options={"gtol": 1e-8, "maxiter": 500})
    return res.x if np.all(np.isfinite(res.x)) else np.asarray(beta_start, dtype=float)


def naive_spline_fit(kv: KnotVector, w, y) -> np.ndarray:
    """Least-squares spline coefficients of Y on W, ignoring the measurement error."""
    basis = basis_matrix(kv, np.clip(np.asarray(w, dtype=float), 0.0, 1.0))
    beta, *_ = np.linalg.lstsq(basis, np.asarray(y, dtype=float), rcond=None)
    return beta


class RegressionEquation:
    """The corrected estimating equation as a function of beta, for fixed data and grid."""

    def __init__(self, kv, noise, law, work, w, y, opts: RegressionFitOptions | None = None):
        _check_noise(noise)
        self.opts = opts or RegressionFitOptions()
        self.kv, self.noise, self.law, self.work = kv, noise, law, work
        self.w = np.asarray(w, dtype=float).ravel()
        self.y = np.asarray(y, dtype=float).ravel()
        if self.w.shape != self.y.shape:
            raise ValueError("w and y must have the same length")
        self.grid = plane_grid(
            self.w, self.y, law, noise, self.opts.plane_points, self.opts.tail_sigmas, centers=work.points
        )
        self._cache: dict[bytes, tuple] = {}
        self.max_residual = 0.0
        self.max_ridge = 0.0

    def solve(self, beta) -> CorrectionSolve:
        return self.evaluate(beta)[1]

    def evaluate(self, beta):
        """Return ``(U(beta), solve, excluded)``; results are cached by beta."""
        beta = np.asarray(beta, dtype=float)
        key = beta.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        model = RegressionModel(self.kv, beta)
        A, H = build_AH(model, self.noise, self.law, self.work, self.grid)
        sol = solve_correction(A, H, self.kv, self.work)
        self.max_residual = max(self.max_residual, sol.residual)
        self.max_ridge = max(self.max_ridge, sol.ridge)
        terms, ok = estimating_terms(model, self.noise, self.law, self.work, sol, self.w, self.y)
        excluded = int(np.count_nonzero(~ok))
        if excluded == self.w.size or excluded > self.opts.max_excluded_frac * self.w.size:
            raise DegenerateDataError(
                f"{excluded} of {self.w.size} observations have vanishing working likelihood"
            )
        out = (terms[ok].mean(axis=0), sol, excluded)
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[key] = out
        return out

    def jacobian(self, beta, value=None) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        u0 = self.evaluate(beta)[0] if value is None else value
        d = beta.size
        J = np.empty((d, d))
        for k in range(d):
            h = self.opts.fd_step * (1.0 + abs(beta[k]))
            b = beta.copy()
            b[k] += h
            J[:, k] = (self.evaluate(b)[0] - u0) / h
        return J


_TRIAL_FAILURES = (SingularSystemError, DegenerateDataError, FloatingPointError, ValueError)


def _newton_step(J: np.ndarray, u: np.ndarray) -> np.ndarray:
    if np.linalg.cond(J) < 1e12:
        return np.linalg.solve(J, -u)
    # near-singular Jacobian: Levenberg-Marquardt damped step
    lam = 1e-8 * max(1.0, float(np.max(np.abs(J))))
    JtJ = J.T @ J
    return np.linalg.solve(JtJ + lam * np.eye(len(u)), -J.T @ u)


def fit_regression(
    kv: KnotVector,
    noise: ErrorLaw,
    law: ErrorLaw,
    work: WorkingDensity,
    w,
    y,
    opts: RegressionFitOptions | None = None,
    beta0=None,
) -> RegressionFit:
    """Solve the corrected estimating equation by Newton's method with a forward-difference Jacobian."""
    opts = opts or RegressionFitOptions()
    w = np.asarray(w, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if w.size < kv.basis_dim:
        raise ValueError(f"need at least {kv.basis_dim} observations for {kv.basis_dim} basis functions, got {w.size}")
    eq = RegressionEquation(kv, noise, law, work, w, y, opts)
    if beta0 is not None:
        beta = np.asarray(beta0, dtype=float).copy()
    else:
        beta = naive_spline_fit(kv, w, y)
        if opts.init == "working":
            beta = working_mle(kv, noise, law, work, w, y, beta)
    u, _, excluded = eq.evaluate(beta)
    norm = float(np.max(np.abs(u)))
    history = [norm]
    steps = 0
    while norm >= opts.tol and steps < opts.max_iter:
        J = eq.jacobian(beta, u)
        step = _newton_step(J, u)
        alpha = 1.0
        accepted = False
        l2 = float(np.linalg.norm(u))
        while alpha > 1e-6:
            trial = beta + alpha * step
            try:
                u_new, _, exc_new = eq.evaluate(trial)
            except _TRIAL_FAILURES:
                alpha *= 0.5
                continue
            if np.linalg.norm(u_new) < (1.0 - 1e-4 * alpha) * l2:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            log.warning("regression Newton stalled after %d steps (|U| = %.3g)", steps, norm)
            break
        beta, u, excluded = trial, u_new, exc_new
        norm = float(np.max(np.abs(u)))
        history.append(norm)
        steps += 1
    converged = norm < opts.tol
    if not converged:
        log.warning("regression fit did not converge: |U| = %.3g after %d steps", norm, steps)
    return RegressionFit(
        RegressionModel(kv, beta), norm, steps, converged, excluded, w.size, eq.max_residual, eq.max_ridge, history
    )
