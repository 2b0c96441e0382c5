"""Polar-coded integrated data-and-energy link: codec, decoders, modem,
energy chain, a small reverse-mode autodiff engine and a Monte Carlo harness."""

from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateConstellationError,
    FitError,
    InvalidInputError,
    NumericGuardError,
    UnsupportedLengthError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DegenerateConstellationError",
    "FitError",
    "InvalidInputError",
    "NumericGuardError",
    "UnsupportedLengthError",
]
