"""Multivariate normal variance mixtures via randomized quasi-Monte Carlo."""

__version__ = "0.1.0"
