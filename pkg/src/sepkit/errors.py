"""Exception types shared across the package."""

from __future__ import annotations

__all__ = [
    "SepkitError",
    "ShapeError",
    "FormatError",
    "ConfigError",
    "TrainingDivergence",
    "StageOrderError",
    "DecodingError",
]


class SepkitError(Exception):
    """Base class for all package errors."""


class ShapeError(SepkitError):
    """An operation received tensors with incompatible shapes."""


class FormatError(SepkitError):
    """A binary container (dataset, checkpoint, WAV) violates its format."""


class ConfigError(SepkitError):
    """A configuration value is missing, malformed, or out of range."""


class TrainingDivergence(SepkitError):
    """A training step produced a non-finite loss or gradient."""


class StageOrderError(SepkitError):
    """A pipeline stage was invoked before its prerequisites were trained."""


class DecodingError(SepkitError):
    """Token decoding reached an invalid state (e.g. empty candidate set)."""
