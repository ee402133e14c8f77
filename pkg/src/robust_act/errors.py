"""Exception types shared across the package."""


class RobustActError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RobustActError, ValueError):
    """Invalid configuration or argument combination."""


class StateError(RobustActError, RuntimeError):
    """Operation invoked on an object in the wrong state."""


class NonFiniteError(RobustActError, FloatingPointError):
    """A NaN or Inf reached a place that requires finite values."""

    def __init__(self, message, segment=None):
        super().__init__(message)
        self.segment = segment


class InputError(RobustActError, ValueError):
    """Malformed input data (e.g. a non-finite observation)."""


class CheckpointError(RobustActError, OSError):
    """Checkpoint could not be read or does not match the expected layout."""


class AggregationError(RobustActError, ValueError):
    """Run records cannot be combined (e.g. mismatched episode counts)."""
