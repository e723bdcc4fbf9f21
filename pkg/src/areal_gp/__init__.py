"""Spatially correlated Gaussian-process models for areal time series, fitted by MCMC."""

from .errors import ArealGPError, CalibrationError, NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = ["ArealGPError", "CalibrationError", "NumericalError", "ValidationError", "__version__"]
