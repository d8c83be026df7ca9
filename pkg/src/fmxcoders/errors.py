"""Exception hierarchy shared by the library and the CLI."""


class FmxError(Exception):
    """Base class for all fmxcoders errors."""

    exit_code = 4


class DimensionError(FmxError, ValueError):
    exit_code = 3


class ConfigError(FmxError, ValueError):
    exit_code = 2


class DataError(FmxError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """A binary file failed to parse. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(FmxError, RuntimeError):
    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class JudgeParseError(FmxError, ValueError):
    """The judge's reply did not contain a usable verdict."""

    def __init__(self, message, raw):
        super().__init__(message)
        self.raw = raw


class JudgeRequestError(FmxError, RuntimeError):
    """The judge endpoint failed after all retries, or rejected the request outright."""
