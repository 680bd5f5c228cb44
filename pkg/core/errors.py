"""Exception types shared across the place-recognition pipeline."""

from __future__ import annotations


class VprError(Exception):
    """Base class for pipeline errors."""

    exit_code: int = 1


class ConfigurationError(VprError, ValueError):
    """Invalid preset, run configuration, or operation parameter."""

    exit_code = 2


class DimensionError(VprError, ValueError):
    """Tensor shapes that do not line up."""

    exit_code = 3


class DataError(VprError):
    """Missing or malformed input files."""

    exit_code = 3


class TensorFormatError(DataError):
    """A tensor or checkpoint file failed header or CRC validation."""


class NumericFailure(VprError, ArithmeticError):
    """A NaN or Inf showed up where finite values are required."""

    exit_code = 4


__all__ = [
    "ConfigurationError",
    "DataError",
    "DimensionError",
    "NumericFailure",
    "TensorFormatError",
    "VprError",
]
