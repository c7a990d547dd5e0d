"""Spline-based amortized variational inference on conjugate benchmarks."""

__version__ = "0.1.0"
