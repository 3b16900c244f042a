"""Clustered directional networks from multivariate time series."""

__version__ = "0.1.0"
