"""Spline-assisted density and regression estimation under covariate measurement error."""

__version__ = "0.1.0"
