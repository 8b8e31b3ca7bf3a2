"""Shared exception types."""


class GeosetError(Exception):
    """Base class for errors raised by this package."""


class FileFormatError(GeosetError):
    """A file on disk does not match its declared format.

    Carries the offending path and, when known, the byte offset of the
    first bad byte so CLI error records can point at it.
    """

    def __init__(self, message, path=None, byte_offset=None):
        super().__init__(message)
        self.path = str(path) if path is not None else None
        self.byte_offset = byte_offset

    def __str__(self):
        msg = super().__str__()
        if self.path is not None:
            msg = f"{self.path}: {msg}"
        if self.byte_offset is not None:
            msg = f"{msg} (byte offset {self.byte_offset})"
        return msg


class TrainerError(GeosetError):
    """Raised when optimization cannot continue (e.g. non-finite gradients)."""
