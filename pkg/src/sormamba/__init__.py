"""Order-robust selective state-space forecasting for multivariate series."""

__version__ = "0.1.0"
