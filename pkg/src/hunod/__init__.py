"""Hybrid unsupervised detection of outlying entities in tax declaration data."""

from hunod.errors import ConfigError, DataError, HunodError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "HunodError", "NumericError", "__version__"]
