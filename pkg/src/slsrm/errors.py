"""Exception hierarchy shared across the package."""


class SLSRMError(Exception):
    """Base class for all package errors."""


class InvalidInput(SLSRMError, ValueError):
    """Non-finite or otherwise unusable numeric input."""


class SingularMatrix(SLSRMError, ValueError):
    pass


class DegenerateVector(SLSRMError, ValueError):
    """A vector with zero variance was passed where variance is required."""


class FormatError(SLSRMError, ValueError):
    """A binary file does not follow the expected container layout."""


class ShapeMismatch(SLSRMError, ValueError):
    pass


class RankError(SLSRMError, ValueError):
    """Requested factor count exceeds what the data can support."""


class ProtocolError(SLSRMError, ValueError):
    """Evaluation protocol prerequisites do not hold."""


class SpecError(SLSRMError, ValueError):
    """Infeasible synthetic-data specification."""
