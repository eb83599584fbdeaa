"""Exception hierarchy shared across the package."""


class PatchMaskError(Exception):
    """Base class for all errors raised by patchmask."""


class ContractViolation(PatchMaskError, ValueError):
    """An operation was called with inputs that break its preconditions."""


class ConfigurationError(PatchMaskError, ValueError):
    pass


class DataError(PatchMaskError, ValueError):
    pass


class FormatError(PatchMaskError):
    """A container file could not be decoded.

    ``offset`` is the byte position at which decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    def __init__(self, expected, actual, offset=None):
        super().__init__(
            f"truncated payload: expected at least {expected} bytes, got {actual}", offset
        )
        self.expected = expected
        self.actual = actual


class ChecksumError(FormatError):
    pass


class TrainingAborted(PatchMaskError, RuntimeError):
    """Training stopped on a non-finite loss or gradient.

    ``result`` holds the partial training result with the last good
    checkpoint, when one exists.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
