"""Fokker-Planck solvers, quantile fixed points and kernel certificates for quantile-coupled diffusions."""

__version__ = "0.1.0"
