"""Covariate balance diagnostics for time-varying treatments under inverse probability weighting."""

__version__ = "0.1.0"
