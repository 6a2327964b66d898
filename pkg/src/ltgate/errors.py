"""Exception types shared across the package."""


class LTGateError(Exception):
    """Base class for all package errors."""


class ParameterError(LTGateError, ValueError):
    """A scalar argument or configuration value is out of its valid range."""


class ShapeError(LTGateError, ValueError):
    """Array shapes do not match an operation's contract."""


class ConfigError(LTGateError, ValueError):
    """Experiment configuration is malformed; message names the field path."""


class DataFormatError(LTGateError):
    """A file (IDX, spike file, checkpoint) is corrupt or has the wrong format."""


class CalibrationError(LTGateError, RuntimeError):
    """Threshold calibration cannot reach the target rate band."""
