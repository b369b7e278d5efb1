"""Cluster-wise spatial-temporal forecasting of city wireless traffic."""

__version__ = "0.1.0"
