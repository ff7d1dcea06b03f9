"""Deterministic quadrature rules.

Three rules are provided:

* ``unit_grid``: composite Gauss-Legendre on [0, 1], one panel per knot
  interval, for integrals of spline-smooth integrands.
* ``convolution_grid``: per-observation composite Gauss-Legendre over the
  window ``[w - R, w + R] & [0, 1]`` where the error density is non-negligible,
  with breakpoints at the knots, at ``w`` and at the window edges so that
  integrands of the form ``g(x) f_U(w - x)`` are smooth on every panel.
* ``plane_grid``: tensor rule over a truncated (y, w) rectangle for the
  double integrals of the semiparametric correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .error_models import ErrorLaw
from .spline_core import KnotVector

DEFAULT_NODES_PER_PANEL = 20
DEFAULT_PLANE_POINTS = 61
DEFAULT_TAIL_SIGMAS = 4.0
MIN_PLANE_POINTS = 20


@lru_cache(maxsize=64)
def _gauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def composite_gauss(breaks, nodes_per_panel: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule on consecutive breakpoints.

    ``breaks`` has shape ``(..., P + 1)``; the result has shape
    ``(..., P * nodes_per_panel)``.  Zero-width panels get zero weight.
    """
    b = np.asarray(breaks, dtype=float)
    g, gw = _gauss(nodes_per_panel)
    a, c = b[..., :-1], b[..., 1:]
    half = 0.5 * (c - a)
    mid = 0.5 * (c + a)
    nodes = mid[..., None] + half[..., None] * g
    weights = half[..., None] * gw
    lead = b.shape[:-1]
    return nodes.reshape(lead + (-1,)), weights.reshape(lead + (-1,))


@dataclass(frozen=True)
class UnitGrid:
    nodes: np.ndarray
    weights: np.ndarray
    nodes_per_panel: int

    def integrate(self, values):
        """Integrate values sampled at ``nodes`` (leading axis)."""
        return self.weights @ np.asarray(values)


def unit_grid(kv: KnotVector, nodes_per_panel: int = DEFAULT_NODES_PER_PANEL) -> UnitGrid:
    if nodes_per_panel < 2:
        raise ValueError("nodes_per_panel must be >= 2")
    nodes, weights = composite_gauss(kv.breaks, nodes_per_panel)
    return UnitGrid(nodes, weights, nodes_per_panel)


@dataclass(frozen=True)
class ConvolutionGrid:
    """Per-observation quadrature nodes for ``int_0^1 g(x) f_U(w_i - x) dx``.

    ``nodes`` and ``weights`` have shape ``(n, Q)``; ``kernel`` holds
    ``weights * f_U(w_i - nodes)`` so that an integral is ``(kernel * g).sum(1)``.
    """

    nodes: np.ndarray
    weights: np.ndarray
    kernel: np.ndarray


def convolution_grid(
    kv: KnotVector,
    w_data,
    law: ErrorLaw,
    nodes_per_panel: int = 8,
    subdivisions: int = 8,
    cover_unit: bool = False,
) -> ConvolutionGrid:
    """Per-observation rule; with ``cover_unit`` every row spans all of [0, 1].

    Full coverage lets the same nodes integrate ``g`` alone as well as
    ``g * f_U(w - .)``, which keeps likelihood ratios consistent.
    """
    w = np.asarray(w_data, dtype=float).ravel()
    radius = law.support_radius
    win_lo = np.clip(w - radius, 0.0, 1.0)
    win_hi = np.clip(w + radius, 0.0, 1.0)
    if cover_unit:
        lo, hi = np.zeros_like(w), np.ones_like(w)
    else:
        lo, hi = win_lo, win_hi
    # offsets cluster near w, where Laplace/normal densities vary fastest
    frac = (np.arange(1, subdivisions + 1) / subdivisions) ** 2
    offsets = np.concatenate([-radius * frac, [0.0], radius * frac])
    pts = np.concatenate(
        [
            np.broadcast_to(np.asarray(kv.interior, dtype=float), (w.size, kv.n_interior)),
            w[:, None] + offsets[None, :],
            lo[:, None],
            hi[:, None],
            win_lo[:, None],
            win_hi[:, None],
        ],
        axis=1,
    )
    pts = np.sort(np.clip(pts, lo[:, None], hi[:, None]), axis=1)
    nodes, weights = composite_gauss(pts, nodes_per_panel)
    kernel = weights * law.density(w[:, None] - nodes)
    return ConvolutionGrid(nodes, weights, kernel)


@dataclass(frozen=True)
class PlaneGrid:
    """Tensor rule on ``[y_lo, y_hi] x [w_lo, w_hi]``; ``y_*`` is None for a w-only grid."""

    w_nodes: np.ndarray
    w_weights: np.ndarray
    y_nodes: np.ndarray | None = None
    y_weights: np.ndarray | None = None

    @property
    def w_range(self) -> tuple[float, float]:
        return float(self.w_nodes[0]), float(self.w_nodes[-1])

    @property
    def y_range(self) -> tuple[float, float] | None:
        if self.y_nodes is None:
            return None
        return float(self.y_nodes[0]), float(self.y_nodes[-1])


def trapezoid_rule(lo: float, hi: float, m: int) -> tuple[np.ndarray, np.ndarray]:
    nodes = np.linspace(lo, hi, m)
    h = (hi - lo) / (m - 1)
    weights = np.full(m, h)
    weights[0] = weights[-1] = 0.5 * h
    return nodes, weights


def _margin(law: ErrorLaw, tail_sigmas: float) -> float:
    if law.kind == "uniform":
        return law.param
    return tail_sigmas * law.std


def plane_grid(
    w_data,
    y_data,
    law: ErrorLaw,
    noise: ErrorLaw | None,
    m_points: int = DEFAULT_PLANE_POINTS,
    tail_sigmas: float = DEFAULT_TAIL_SIGMAS,
    centers=None,
) -> PlaneGrid:
    """Truncated integration grid for the (y, w) double integrals.

    Each axis spans the data range widened by ``tail_sigmas`` standard
    deviations of its law (the exact half-width for uniform errors) and is
    covered by an ``m_points`` trapezoid rule.

    When ``centers`` (the support points of the working density) are given,
    the w-axis is adapted to the integrand ``f_U(w - x_j)``: the range also
    covers every center, a normal law gets a trapezoid rule with spacing at
    most half a standard deviation, and non-smooth laws get a composite
    Gauss-Legendre rule with breakpoints at every kink.
    """
    w = np.asarray(w_data, dtype=float).ravel()
    if w.size == 0:
        raise ValueError("plane grid needs at least one w observation")
    if m_points < MIN_PLANE_POINTS:
        raise ValueError(f"m_points must be >= {MIN_PLANE_POINTS}, got {m_points}")
    w_min, w_max = float(w.min()), float(w.max())
    if centers is not None:
        c = np.asarray(centers, dtype=float).ravel()
        w_min, w_max = min(w_min, float(c.min())), max(w_max, float(c.max()))
    margin = _margin(law, tail_sigmas)
    w_lo, w_hi = w_min - margin, w_max + margin

    if centers is None:
        w_nodes, w_weights = trapezoid_rule(w_lo, w_hi, m_points)
    elif law.smooth:
        m = max(m_points, math.ceil((w_hi - w_lo) / (0.5 * law.std)) + 1)
        w_nodes, w_weights = trapezoid_rule(w_lo, w_hi, m)
    else:
        w_nodes, w_weights = _kink_aligned_rule(w_lo, w_hi, law, np.asarray(centers, dtype=float))

    if y_data is None:
        return PlaneGrid(w_nodes, w_weights)
    if noise is None:
        raise ValueError("a noise law is required when y data are given")
    y = np.asarray(y_data, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("plane grid needs at least one y observation")
    ym = _margin(noise, tail_sigmas)
    y_nodes, y_weights = trapezoid_rule(float(y.min()) - ym, float(y.max()) + ym, m_points)
    return PlaneGrid(w_nodes, w_weights, y_nodes, y_weights)


def _kink_aligned_rule(lo: float, hi: float, law: ErrorLaw, centers: np.ndarray):
    kinks = law.kinks(centers)
    pts = np.unique(np.concatenate([[lo, hi], kinks[(kinks > lo) & (kinks < hi)]]))
    if law.kind == "uniform":
        # integrand is piecewise constant between kinks
        return composite_gauss(pts, 2)
    # laplace: smooth exponential pieces, cap panel width at one scale length
    width = law.param
    refined = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        k = max(1, math.ceil((b - a) / width))
        refined.append(np.linspace(a, b, k + 1)[1:])
    return composite_gauss(np.concatenate(refined), 4)
