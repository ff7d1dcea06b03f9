"""Knot vectors and B-spline basis evaluation on [0, 1].

The basis is the usual order-``r`` B-spline family on an open (clamped) knot
sequence: ``r`` copies of 0, the interior knots, ``r`` copies of 1.  Values are
right-continuous at interior knots and the last basis function equals one at
``x = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

DEFAULT_ORDER = 4


@dataclass(frozen=True)
class KnotVector:
    """Clamped knot sequence on [0, 1].

    Attributes
    ----------
    order : int
        Spline order ``r`` (degree ``r - 1``); cubic splines have ``order=4``.
    interior : tuple of float
        Sorted interior knots strictly inside (0, 1).
    """

    order: int
    interior: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if int(self.order) != self.order or self.order < 1:
            raise ValueError(f"order must be a positive integer, got {self.order!r}")
        interior = tuple(float(t) for t in self.interior)
        if any(not (0.0 < t < 1.0) for t in interior):
            raise ValueError("interior knots must lie strictly inside (0, 1)")
        if any(b < a for a, b in zip(interior, interior[1:])):
            raise ValueError("interior knots must be sorted")
        object.__setattr__(self, "interior", interior)
        object.__setattr__(self, "order", int(self.order))

    @property
    def n_interior(self) -> int:
        return len(self.interior)

    @property
    def basis_dim(self) -> int:
        return self.n_interior + self.order

    @property
    def full(self) -> np.ndarray:
        r = self.order
        return np.concatenate([np.zeros(r), np.asarray(self.interior, dtype=float), np.ones(r)])

    @property
    def breaks(self) -> np.ndarray:
        """Distinct knots including both endpoints."""
        return np.unique(np.concatenate([[0.0], self.interior, [1.0]]))

    def _spacings(self) -> list[Fraction]:
        pts = [Fraction(0)] + [Fraction(t).limit_denominator(10**9) for t in self.interior] + [Fraction(1)]
        gaps = [b - a for a, b in zip(pts, pts[1:])]
        return [g for g in gaps if g > 0]

    @property
    def h_b(self) -> float:
        """Largest knot spacing."""
        return float(max(self._spacings()))

    @property
    def h_s(self) -> float:
        """Smallest positive knot spacing."""
        return float(min(self._spacings()))

    @property
    def mesh_ratio(self) -> float:
        # knots are rationalised so equally spaced constructions give exactly 1
        gaps = self._spacings()
        return float(max(gaps) / min(gaps))

    def to_dict(self) -> dict:
        return {"order": self.order, "interior": list(self.interior), "full": self.full.tolist()}


def make_knots(n_interior: int, order: int = DEFAULT_ORDER) -> KnotVector:
    """Equally spaced interior knots ``j / (N + 1)``, ``j = 1..N``."""
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if n_interior < 0:
        raise ValueError(f"n_interior must be >= 0, got {n_interior}")
    m = n_interior + 1
    return KnotVector(order, tuple(j / m for j in range(1, m)))


def knots_for_sample_size(n: int) -> int:
    """Smallest integer strictly larger than ``1.3 * n**(1/5)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return math.floor(1.3 * n ** 0.2) + 1


KNOT_CONVENTIONS = ("basis", "interior")


def knot_rule(n: int, convention: str = "basis", order: int = DEFAULT_ORDER) -> KnotVector:
    """Equally spaced knots sized by ``knots_for_sample_size(n)``.

    ``convention="basis"`` reads the count as the number of basis functions
    (so ``count - order`` interior knots); ``"interior"`` uses it as the
    number of interior knots directly.
    """
    count = knots_for_sample_size(n)
    if convention == "basis":
        return make_knots(max(count - order, 0), order)
    if convention == "interior":
        return make_knots(count, order)
    raise ValueError(f"unknown knot convention {convention!r}; expected one of {KNOT_CONVENTIONS}")


def basis_matrix(kv: KnotVector, x) -> np.ndarray:
    """Evaluate all basis functions at the points ``x``.

    Returns an array of shape ``x.shape + (d,)``.  Uses the triangular
    Cox-de Boor scheme on the nonzero functions of each knot span.
    """
    x = np.asarray(x, dtype=float)
    shape = x.shape
    xs = x.ravel()
    if xs.size and (np.any(~np.isfinite(xs)) or xs.min() < 0.0 or xs.max() > 1.0):
        raise ValueError("basis evaluation requires x in [0, 1]")
    t = kv.full
    r = kv.order
    d = kv.basis_dim
    p = r - 1
    # span index i with t[i] <= x < t[i+1], clamped so x = 1 uses the last span
    span = np.searchsorted(t, xs, side="right") - 1
    span = np.clip(span, p, d - 1)

    vals = np.zeros((xs.size, r))
    vals[:, 0] = 1.0
    left = np.zeros((xs.size, r))
    right = np.zeros((xs.size, r))
    for j in range(1, r):
        left[:, j] = xs - t[span + 1 - j]
        right[:, j] = t[span + j] - xs
        saved = np.zeros(xs.size)
        for k in range(j):
            denom = right[:, k + 1] + left[:, j - k]
            temp = vals[:, k] / denom
            vals[:, k] = saved + right[:, k + 1] * temp
            saved = left[:, j - k] * temp
        vals[:, j] = saved

    out = np.zeros((xs.size, d))
    cols = span[:, None] - p + np.arange(r)[None, :]
    np.put_along_axis(out, cols, vals, axis=1)
    return out.reshape(shape + (d,))


def eval_basis(kv: KnotVector, x: float) -> np.ndarray:
    """Basis vector ``B_r(x)`` at a single point."""
    return basis_matrix(kv, np.array([x]))[0]


def gram_eigen_bounds(kv: KnotVector, samples) -> tuple[float, float]:
    """Extreme eigenvalues of the empirical second-moment matrix of ``samples``.

    Each row of ``samples`` is a vector of basis integrals
    ``int_0^1 B_r(x) g_i(x) dx`` for one random function ``g_i``.
    """
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        return 0.0, 0.0
    s = np.atleast_2d(s)
    if s.shape[1] != kv.basis_dim:
        raise ValueError(f"sample length {s.shape[1]} does not match basis dimension {kv.basis_dim}")
    c_hat = s.T @ s / s.shape[0]
    eig = np.linalg.eigvalsh(c_hat)
    return float(eig[0]), float(eig[-1])
