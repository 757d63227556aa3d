"""Exception taxonomy shared across the pipeline.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class FramegenError(Exception):
    """Base class for all package errors."""


class ConfigError(FramegenError):
    """Invalid configuration, unknown keys, or incompatible settings."""


class DataError(FramegenError):
    """Malformed inputs: bad shapes, frame-boundary violations, empty corpora."""


class NumericalError(FramegenError):
    """Non-finite values or diverging optimization detected at runtime."""
