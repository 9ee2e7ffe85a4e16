"""
Exception hierarchy shared by the helper and main modules.

Helpers raise; only the command-line front end turns an exception into an exit code.
"""

# Exit codes reported by the command-line front end
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_STORAGE = 2
EXIT_INTERNAL = 3


class SymmetryError(Exception):

    """
    Base class for every error raised by this package.
    """

    kind = 'internal'
    exit_code = EXIT_INTERNAL


class ValidationError(SymmetryError, ValueError):

    """
    Raised when an input value, shape or configuration entry is invalid.
    """

    kind = 'validation'
    exit_code = EXIT_VALIDATION


class ShapeMismatchError(ValidationError):
    kind = 'shape'


class MeshError(ValidationError):
    kind = 'mesh'


class DegenerateFieldError(ValidationError):
    kind = 'degenerate'


class FormatError(ValidationError):

    """
    Raised when a file cannot be parsed. The message names the line number or byte offset.
    """

    kind = 'format'


class StorageError(SymmetryError, OSError):

    """
    Raised when a path cannot be read or written.
    """

    kind = 'io'
    exit_code = EXIT_STORAGE
