"""Exception hierarchy shared across the package.

The CLI maps :class:`InputError` (and its subclasses) to exit code 1 and any
other exception to exit code 2.
"""


class MGViTError(Exception):
    """Base class for all package errors."""


class InputError(MGViTError, ValueError):
    """Invalid user-supplied value (bad label, k out of range, empty split...)."""


class ShapeError(InputError):
    """Tensor or array dimensions do not agree."""


class UsageError(InputError):
    """An API was called in a state where it is not defined."""


class FormatError(InputError):
    """Malformed file on disk.  ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int = 0, path=None):
        where = f" in {path}" if path is not None else ""
        super().__init__(f"{message}{where} (byte offset {offset})")
        self.offset = offset
        self.path = path


class NonFiniteError(MGViTError, FloatingPointError):
    """An operation produced NaN or Inf."""
