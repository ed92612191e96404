"""Lagged couplings of PDMP samplers and unbiased estimators built on them."""

__version__ = "0.1.0"
