"""Exception hierarchy shared by the library and the command line front end."""

from __future__ import annotations


class SpatialMGIVError(Exception):
    """Base class for all errors raised by this package."""


class PanelDataError(SpatialMGIVError, ValueError):
    """Malformed, unbalanced or inconsistent panel input."""


class WeightMatrixError(SpatialMGIVError, ValueError):
    """Invalid spatial weight matrix or degenerate geometry."""


class RankDeficiencyError(SpatialMGIVError, ArithmeticError):
    """A matrix that must have full rank does not."""


class IdentificationError(SpatialMGIVError, ValueError):
    """Fewer instruments than parameters, or a missing instrument ingredient."""


class NumericError(SpatialMGIVError, ArithmeticError):
    """Non-finite values or a singular system encountered during computation."""


class ConfigError(SpatialMGIVError, ValueError):
    """Invalid configuration file or option value."""
