"""Calibrated uncertainty bands for wavelet neural operator ensembles."""

__version__ = "0.1.0"
