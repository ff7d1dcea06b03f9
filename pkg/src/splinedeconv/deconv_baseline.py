"""Deconvoluting-kernel comparators and their error-ignoring counterparts.

The base kernel has Fourier transform ``(1 - t^2)^3`` on [-1, 1], so the
division by the error characteristic function is over a bounded range for
every error law.  Bandwidths are always supplied by the caller.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .error_models import ErrorLaw

FOURIER_NODES = 2048
CHAR_FLOOR = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    bandwidth: float
    law: ErrorLaw | None = None  # None means no deconvolution
    fourier_nodes: int = FOURIER_NODES

    def __post_init__(self) -> None:
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth!r}")


def kernel_ft(t):
    t = np.asarray(t, dtype=float)
    return np.where(np.abs(t) <= 1.0, (1.0 - t * t) ** 3, 0.0)


def _moment(k: int) -> float:
    # int_0^1 t^(2k) (1 - t^2)^3 dt
    return 1.0 / (2 * k + 1) - 3.0 / (2 * k + 3) + 3.0 / (2 * k + 5) - 1.0 / (2 * k + 7)


_SERIES = np.array([(-1) ** k * _moment(k) / math.factorial(2 * k) for k in range(30)])


def base_kernel(x):
    """Closed form of ``(1/2pi) int_{-1}^{1} cos(tx) (1 - t^2)^3 dt``."""
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    out = np.empty_like(ax)
    small = ax < 2.0
    xs = ax[small] ** 2
    out[small] = np.polynomial.polynomial.polyval(xs, _SERIES) / math.pi
    xl = ax[~small]
    out[~small] = (
        48.0 * np.cos(xl) / (math.pi * xl**4) * (1.0 - 15.0 / xl**2)
        - 144.0 * np.sin(xl) / (math.pi * xl**5) * (2.0 - 5.0 / xl**2)
    )
    return out


def _fourier_grid(spec: KernelSpec):
    t = np.linspace(-1.0, 1.0, spec.fourier_nodes)
    wt = np.full(t.size, t[1] - t[0])
    wt[0] = wt[-1] = 0.5 * (t[1] - t[0])
    ratio = kernel_ft(t)
    if spec.law is not None:
        phi = spec.law.char_fn(t / spec.bandwidth)
        bad = np.abs(phi) < CHAR_FLOOR
        if np.any(bad & (ratio > 0)):
            warnings.warn(
                "error characteristic function falls below 1e-12 inside the kernel support; truncating",
                RuntimeWarning,
                stacklevel=3,
            )
        ratio = np.where(bad, 0.0, ratio / np.where(bad, 1.0, phi))
    return t, wt * ratio


def deconv_kernel(z, spec: KernelSpec) -> np.ndarray:
    """Deconvoluting kernel ``K_U(z) = (1/2pi) int exp(-itz) phi_K(t) / phi_U(t/h) dt``."""
    z = np.asarray(z, dtype=float)
    t, wr = _fourier_grid(spec)
    return (np.cos(np.multiply.outer(z, t)) @ wr) / (2.0 * math.pi)


def _weighted_transform(x_grid, w, weights, spec: KernelSpec) -> np.ndarray:
    """``(1/(n h)) sum_i weights_i K_U((x - W_i)/h)`` on the grid via the empirical characteristic function."""
    h = spec.bandwidth
    t, wr = _fourier_grid(spec)
    s = t / h
    phase = np.multiply.outer(s, w)  # (T, n)
    ecf_re = np.cos(phase) @ weights / w.size
    ecf_im = np.sin(phase) @ weights / w.size
    xs = np.multiply.outer(np.asarray(x_grid, dtype=float), s)
    # real part of exp(-i s x) * ecf(s); the symmetric kernel makes the imaginary part vanish
    vals = np.cos(xs) @ (wr * ecf_re) + np.sin(xs) @ (wr * ecf_im)
    return vals / (2.0 * math.pi * h)


def deconv_density(w_data, spec: KernelSpec, x_grid) -> np.ndarray:
    """Deconvoluting kernel density estimate; negative values are kept."""
    w = np.asarray(w_data, dtype=float).ravel()
    return _weighted_transform(x_grid, w, np.ones_like(w), spec)


def deconv_regression(w_data, y_data, spec: KernelSpec, x_grid, mask_rel: float = 1e-6) -> np.ndarray:
    """Nadaraya-Watson ratio with the deconvoluting kernel; masked points are NaN."""
    w = np.asarray(w_data, dtype=float).ravel()
    y = np.asarray(y_data, dtype=float).ravel()
    num = _weighted_transform(x_grid, w, y, spec)
    den = _weighted_transform(x_grid, w, np.ones_like(w), spec)
    keep = np.abs(den) >= mask_rel * np.max(np.abs(den))
    out = np.full(den.shape, np.nan)
    out[keep] = num[keep] / den[keep]
    return out


def naive_kernel(w_data, bandwidth: float, x_grid, y_data=None, mask_rel: float = 1e-6) -> np.ndarray:
    """Error-ignoring kernel density (``y_data`` None) or local-constant regression with the same kernel."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    w = np.asarray(w_data, dtype=float).ravel()
    k = base_kernel(np.subtract.outer(np.asarray(x_grid, dtype=float), w) / bandwidth)
    if y_data is None:
        return k.sum(axis=1) / (w.size * bandwidth)
    y = np.asarray(y_data, dtype=float).ravel()
    den = k.sum(axis=1)
    keep = np.abs(den) >= mask_rel * np.max(np.abs(den))
    out = np.full(den.shape, np.nan)
    out[keep] = (k @ y)[keep] / den[keep]
    return out


def reference_bandwidth(w_data, law: ErrorLaw | None = None) -> float:
    """Normal-reference bandwidth ``1.06 sigma_X n^(-1/5)`` with ``var(X) = var(W) - var(U)``."""
    w = np.asarray(w_data, dtype=float).ravel()
    var_x = np.var(w, ddof=1) - (law.variance if law is not None else 0.0)
    sigma_x = math.sqrt(max(var_x, 0.05 * np.var(w, ddof=1)))
    return 1.06 * sigma_x * w.size ** (-0.2)
