"""Worst-case latent-distribution characterisation and domain-invariant
representation learning for time-series classification."""

__version__ = "0.1.0"
