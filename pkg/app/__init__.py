"""Riemannian metrics from energy-based models and geodesics on toy data manifolds."""

__version__ = "0.1.0"
