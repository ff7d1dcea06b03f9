"""Zero-mean error laws for the measurement error U and the regression noise.

``param`` is the variance for ``normal``, the scale ``b`` for ``laplace``
(variance ``2 b**2``) and the half-width ``c`` for ``uniform`` (variance
``c**2 / 3``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

KINDS = ("normal", "laplace", "uniform")


@dataclass(frozen=True)
class ErrorLaw:
    kind: str
    param: float

    def __post_init__(self) -> None:
        kind = str(self.kind).lower()
        if kind not in KINDS:
            raise ValueError(f"unknown error law {self.kind!r}; expected one of {KINDS}")
        param = float(self.param)
        if not (param > 0.0 and math.isfinite(param)):
            raise ValueError(f"error law parameter must be positive, got {self.param!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "param", param)

    @property
    def variance(self) -> float:
        if self.kind == "normal":
            return self.param
        if self.kind == "laplace":
            return 2.0 * self.param**2
        return self.param**2 / 3.0

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    @property
    def support_radius(self) -> float:
        """Radius beyond which the density is negligible (exactly zero for uniform)."""
        if self.kind == "normal":
            return 8.5 * self.std
        if self.kind == "laplace":
            return 30.0 * self.param
        return self.param

    @property
    def smooth(self) -> bool:
        return self.kind == "normal"

    def kinks(self, centers) -> np.ndarray:
        """Points where ``density(w - center)`` is not smooth in ``w``."""
        c = np.asarray(centers, dtype=float).ravel()
        if self.kind == "uniform":
            return np.concatenate([c - self.param, c + self.param])
        if self.kind == "laplace":
            return c.copy()
        return np.empty(0)

    def density(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "normal":
            s2 = self.param
            return np.exp(-0.5 * u * u / s2) / math.sqrt(2.0 * math.pi * s2)
        if self.kind == "laplace":
            b = self.param
            return np.exp(-np.abs(u) / b) / (2.0 * b)
        c = self.param
        return np.where(np.abs(u) <= c, 0.5 / c, 0.0)

    def density_deriv(self, e):
        """Derivative of the density; only the normal law is supported."""
        if self.kind != "normal":
            raise ValueError(f"density derivative is only available for the normal law, not {self.kind}")
        e = np.asarray(e, dtype=float)
        return -(e / self.param) * self.density(e)

    def cdf(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "normal":
            return special.ndtr(u / self.std)
        if self.kind == "laplace":
            b = self.param
            return np.where(u < 0, 0.5 * np.exp(u / b), 1.0 - 0.5 * np.exp(-u / b))
        c = self.param
        return np.clip((u + c) / (2.0 * c), 0.0, 1.0)

    def char_fn(self, t):
        """Characteristic function (real, since every law is symmetric)."""
        t = np.asarray(t, dtype=float)
        if self.kind == "normal":
            return np.exp(-0.5 * self.param * t * t)
        if self.kind == "laplace":
            return 1.0 / (1.0 + (self.param * t) ** 2)
        return np.sinc(self.param * t / math.pi)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if count < 0:
            raise ValueError("count must be >= 0")
        if self.kind == "normal":
            return rng.normal(0.0, self.std, size=count)
        if self.kind == "laplace":
            return rng.laplace(0.0, self.param, size=count)
        return rng.uniform(-self.param, self.param, size=count)

    def spec(self) -> str:
        return f"{self.kind}:{self.param!r}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "param": self.param}


def normal_noise(variance: float) -> ErrorLaw:
    return ErrorLaw("normal", variance)


def parse_law(text) -> ErrorLaw:
    """Parse ``"kind:param"`` or a ``{"kind": ..., "param": ...}`` mapping."""
    if isinstance(text, ErrorLaw):
        return text
    if isinstance(text, dict):
        unknown = set(text) - {"kind", "param"}
        if unknown:
            raise ValueError(f"unknown error law keys: {sorted(unknown)}")
        if "kind" not in text or "param" not in text:
            raise ValueError("error law needs both 'kind' and 'param'")
        return ErrorLaw(text["kind"], text["param"])
    kind, sep, param = str(text).partition(":")
    if not sep:
        raise ValueError(f"error law must look like 'kind:param', got {text!r}")
    try:
        value = float(param)
    except ValueError:
        raise ValueError(f"error law parameter is not a number: {param!r}") from None
    return ErrorLaw(kind.strip(), value)
