"""Spin squeezing in positionally disordered 2D dipolar ensembles."""

__version__ = "0.1.0"
