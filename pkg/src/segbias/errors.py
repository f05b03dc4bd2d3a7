"""Exception hierarchy.

Validation problems derive from ``ValueError`` so callers that only care about
"bad input" can catch the builtin. File-system failures are left as ``OSError``.
"""


class SegBiasError(Exception):
    pass


class ValidationError(SegBiasError, ValueError):
    pass


class GeometryMismatchError(ValidationError):
    pass


class VolumeFormatError(ValidationError):
    """A file could be read but its content is malformed or unsupported."""
