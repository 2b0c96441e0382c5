"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is out of its valid domain."""


class InvalidInputError(ValueError):
    """An argument has the wrong shape or an invalid value."""


class UnsupportedLengthError(ConfigError):
    """Requested code length exceeds what a bundled table covers."""


class DegenerateConstellationError(ValueError):
    """Two constellation points coincide after normalization."""


class FitError(RuntimeError):
    """A regression fit did not reach its tolerance.

    ``residual`` holds the achieved max-abs error.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NumericGuardError(FloatingPointError):
    """A NaN/inf or a forbidden value showed up in a numeric path."""


class CheckpointError(ValueError):
    """A checkpoint file is missing, malformed or has the wrong version."""
