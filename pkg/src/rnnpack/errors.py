"""Exception taxonomy shared by every module.

Three error families cover the library surface: shapes that cannot be
combined, parameters outside their documented domain, and numerical
failures (non-convergence, non-finite values).  The container format adds
two more for malformed and corrupted model files.
"""


class RnnpackError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RnnpackError, ValueError):
    """Operands have incompatible or malformed dimensions."""


class ParameterError(RnnpackError, ValueError):
    """An argument lies outside its documented domain."""


class NumericError(RnnpackError, ArithmeticError):
    """A numerical procedure failed (divergence, non-finite values)."""


class FormatError(RnnpackError, ValueError):
    """A container or config file is malformed: bad magic, version, or
    structure."""


class IntegrityError(RnnpackError, ValueError):
    """A model container is corrupt: checksum mismatch or truncation."""
