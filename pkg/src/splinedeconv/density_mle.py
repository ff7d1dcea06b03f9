"""Spline maximum-likelihood density estimation from error-contaminated data.

The latent density on [0, 1] is modelled as

    f_X(x; theta) = exp(B(x) @ theta) / int_0^1 exp(B(v) @ theta) dv

with ``theta[0] = 0`` for identification, and the observable density of
``W = X + U`` is its convolution with the known error density.  The fit
maximises the average log-likelihood of the observed ``W`` with a damped
Newton iteration using the analytic Hessian.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .error_models import ErrorLaw
from .quadrature import DEFAULT_NODES_PER_PANEL, convolution_grid, unit_grid
from .spline_core import KnotVector, basis_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DensityModel:
    kv: KnotVector
    theta: np.ndarray
    nodes_per_panel: int = DEFAULT_NODES_PER_PANEL

    def __post_init__(self) -> None:
        theta = np.array(self.theta, dtype=float)
        if theta.shape != (self.kv.basis_dim,):
            raise ValueError(f"theta must have length {self.kv.basis_dim}, got shape {theta.shape}")
        if theta[0] != 0.0:
            raise ValueError("theta[0] must be exactly 0 (identification constraint)")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def from_free(cls, kv: KnotVector, theta_free, **kw) -> "DensityModel":
        return cls(kv, np.concatenate([[0.0], np.asarray(theta_free, dtype=float)]), **kw)

    @property
    def theta_free(self) -> np.ndarray:
        return self.theta[1:]

    def pdf(self, x) -> np.ndarray:
        return spline_density(self.kv, self.theta, x, self.nodes_per_panel)

    def observed_pdf(self, law: ErrorLaw, w) -> np.ndarray:
        return convolved_density(self.kv, self.theta, law, w)


def _log_normaliser(kv: KnotVector, theta: np.ndarray, nodes_per_panel: int) -> float:
    grid = unit_grid(kv, nodes_per_panel)
    s = basis_matrix(kv, grid.nodes) @ theta
    top = float(np.max(s))
    return top + float(np.log(grid.weights @ np.exp(s - top)))


def spline_density(kv: KnotVector, theta, x, nodes_per_panel: int = DEFAULT_NODES_PER_PANEL) -> np.ndarray:
    """Exp-normalised spline density for an arbitrary (unconstrained) ``theta``."""
    theta = np.asarray(theta, dtype=float)
    log_c = _log_normaliser(kv, theta, nodes_per_panel)
    with np.errstate(over="ignore"):  # a runaway fit is a spike; inf is the honest value
        return np.exp(basis_matrix(kv, x) @ theta - log_c)


def convolved_density(kv: KnotVector, theta, law: ErrorLaw, w) -> np.ndarray:
    """Density of ``W = X + U`` implied by the spline density of ``X``."""
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(w, dtype=float)
    grid = convolution_grid(kv, w.ravel(), law, cover_unit=True)
    s = basis_matrix(kv, grid.nodes) @ theta
    s = np.where(grid.weights > 0.0, s, -np.inf)
    e = np.exp(s - np.max(s, axis=1, keepdims=True))
    vals = np.sum(grid.kernel * e, axis=1) / np.sum(grid.weights * e, axis=1)
    return vals.reshape(w.shape)


def eval_fx(model: DensityModel, x: float) -> float:
    return float(model.pdf(np.array([x]))[0])


def eval_fw(model: DensityModel, law: ErrorLaw, w: float) -> float:
    return float(model.observed_pdf(law, np.array([w]))[0])


@dataclass
class DensityFitOptions:
    tol: float = 1e-8
    max_iter: int = 500
    nodes_per_panel: int = DEFAULT_NODES_PER_PANEL
    conv_nodes: int = 8
    conv_subdivisions: int = 8
    hessian: str = "analytic"  # or "fd" for the finite-difference debug path
    armijo: float = 1e-4


class DensityObjective:
    """Average log-likelihood of the observed ``W`` as a function of full ``theta``.

    Each observation has its own quadrature rule over [0, 1] (refined where
    the error density varies), and both integrals of the likelihood ratio
    use that rule.  Every term is then a genuine mixture of ``f_U`` and is
    bounded above by ``log max f_U`` whatever ``theta`` is.  All basis
    evaluations are precomputed.
    """

    def __init__(self, kv: KnotVector, law: ErrorLaw, w_data, opts: DensityFitOptions | None = None):
        opts = opts or DensityFitOptions()
        w = np.asarray(w_data, dtype=float).ravel()
        if w.size == 0:
            raise ValueError("w_data must be nonempty")
        if not np.all(np.isfinite(w)):
            raise ValueError("w_data contains non-finite values")
        self.kv, self.law, self.w = kv, law, w
        self.n = w.size
        self.d = kv.basis_dim
        conv = convolution_grid(kv, w, law, opts.conv_nodes, opts.conv_subdivisions, cover_unit=True)
        self.weights = conv.weights
        self.kernel = conv.kernel
        self.basis = basis_matrix(kv, conv.nodes)
        empty = np.flatnonzero(self.kernel.sum(axis=1) <= 0.0)
        if empty.size:
            raise ValueError(
                f"observation(s) {empty[:5].tolist()} have zero likelihood for every density on [0, 1] "
                f"under the {law.kind} error law"
            )

    def _terms(self, theta):
        s = np.einsum("iqk,k->iq", self.basis, theta)
        # shift by the max over nodes that carry weight, so den >= that node's weight
        s = np.where(self.weights > 0.0, s, -np.inf)
        e = np.exp(s - np.max(s, axis=1, keepdims=True))
        num = np.sum(self.kernel * e, axis=1)
        den = np.sum(self.weights * e, axis=1)
        return e, num, den

    def value(self, theta) -> float:
        _, num, den = self._terms(np.asarray(theta, dtype=float))
        with np.errstate(divide="ignore"):
            return float(np.mean(np.log(num) - np.log(den)))

    def evaluate(self, theta, hessian: bool = False):
        """Return ``(loglik, grad, hess)`` with respect to the full ``theta``."""
        theta = np.asarray(theta, dtype=float)
        e, num, den = self._terms(theta)
        if np.any(num <= 0.0) or not np.all(np.isfinite(num)):
            raise FloatingPointError("non-finite likelihood integrand")
        ll = float(np.mean(np.log(num) - np.log(den)))
        post = self.kernel * e / num[:, None]
        prior = self.weights * e / den[:, None]
        post_mean = np.einsum("iq,iqk->ik", post, self.basis)
        prior_mean = np.einsum("iq,iqk->ik", prior, self.basis)
        grad = (post_mean - prior_mean).mean(axis=0)
        if not hessian:
            return ll, grad, None
        d = self.d
        flat_b = self.basis.reshape(-1, d)
        diff = (post - prior).reshape(-1, 1)
        second = (flat_b * diff).T @ flat_b / self.n
        cov = second - (post_mean.T @ post_mean - prior_mean.T @ prior_mean) / self.n
        return ll, grad, cov

    def fd_hessian(self, theta, step: float = 1e-5) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        h = np.zeros((self.d, self.d))
        for k in range(self.d):
            e = np.zeros(self.d)
            e[k] = step
            h[:, k] = (self.evaluate(theta + e)[1] - self.evaluate(theta - e)[1]) / (2 * step)
        return 0.5 * (h + h.T)


def loglik_and_grad(model: DensityModel, law: ErrorLaw, w_data) -> tuple[float, np.ndarray]:
    """Average log-likelihood and its gradient with respect to ``theta[1:]``."""
    obj = DensityObjective(model.kv, law, w_data, DensityFitOptions(nodes_per_panel=model.nodes_per_panel))
    ll, grad, _ = obj.evaluate(model.theta)
    if not np.isfinite(ll):
        raise FloatingPointError("log-likelihood is not finite")
    return ll, grad[1:]


@dataclass
class DensityFit:
    model: DensityModel
    loglik: float
    grad_norm: float
    iterations: int
    converged: bool
    n_obs: int
    history: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "theta": self.model.theta.tolist(),
            "knots": self.model.kv.to_dict(),
            "loglik": self.loglik,
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "n_obs": self.n_obs,
        }


def _damped_direction(neg_hess: np.ndarray, grad: np.ndarray) -> np.ndarray:
    lam = 0.0
    eye = np.eye(len(grad))
    while True:
        try:
            chol = np.linalg.cholesky(neg_hess + lam * eye)
        except np.linalg.LinAlgError:
            lam = 1e-6 if lam == 0.0 else lam * 10.0
            if lam > 1e12:
                return grad.copy()
            continue
        y = np.linalg.solve(chol, grad)
        return np.linalg.solve(chol.T, y)


def fit_density(kv: KnotVector, law: ErrorLaw, w_data, opts: DensityFitOptions | None = None) -> DensityFit:
    """Maximise the observed-data log-likelihood over ``theta[1:]``, starting from zero."""
    opts = opts or DensityFitOptions()
    w = np.asarray(w_data, dtype=float).ravel()
    if w.size < kv.basis_dim:
        raise ValueError(f"need at least {kv.basis_dim} observations for {kv.basis_dim} basis functions, got {w.size}")
    obj = DensityObjective(kv, law, w, opts)
    theta = np.zeros(kv.basis_dim)
    history: list[float] = []
    ll, grad, hess = obj.evaluate(theta, hessian=True)
    steps = 0
    while steps < opts.max_iter:
        g = grad[1:]
        history.append(ll)
        if np.max(np.abs(g)) < opts.tol:
            break
        if opts.hessian == "fd":
            hess = obj.fd_hessian(theta)
        step = _damped_direction(-hess[1:, 1:], g)
        slope = float(g @ step)
        alpha = 1.0
        accepted = False
        while alpha > 1e-12:
            trial = theta.copy()
            trial[1:] += alpha * step
            ll_new = obj.value(trial)
            if np.isfinite(ll_new):
                if ll_new >= ll + opts.armijo * alpha * slope:
                    accepted = True
                elif abs(ll_new - ll) <= 1e-13 * (1.0 + abs(ll)):
                    # objective flat to rounding: accept if the gradient improves
                    g_new = obj.evaluate(trial)[1][1:]
                    accepted = np.max(np.abs(g_new)) < np.max(np.abs(g))
                if accepted:
                    break
            alpha *= 0.5
        if not accepted:
            log.warning("line search stalled after %d steps (grad norm %.3g)", steps, np.max(np.abs(g)))
            break
        theta = trial
        steps += 1
        ll, grad, hess = obj.evaluate(theta, hessian=opts.hessian == "analytic")
    grad_norm = float(np.max(np.abs(grad[1:])))
    converged = grad_norm < opts.tol
    if not converged:
        log.warning("density fit did not converge: grad norm %.3g after %d steps", grad_norm, steps)
    model = DensityModel(kv, theta, opts.nodes_per_panel)
    return DensityFit(model, ll, grad_norm, steps, converged, w.size, history)
