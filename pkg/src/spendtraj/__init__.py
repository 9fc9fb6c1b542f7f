"""Spending-personality micro-segmentation with recurrent hidden-state trajectories."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    MetricError,
    NumericError,
    ParseError,
    SchemaError,
    SpendTrajError,
)
