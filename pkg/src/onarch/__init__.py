"""Bivariate intra-day/overnight ARCH volatility modelling."""

__version__ = "0.1.0"
