"""Imputation-based multivariate time-series anomaly detection with denoising diffusion."""

__version__ = "1.0.0"
