"""Variational filtering EM and amortized variational filtering."""

__version__ = "0.1.0"
