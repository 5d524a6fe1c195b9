"""Exception hierarchy shared across the package."""


class VisaVisError(Exception):
    """Base class for all package errors."""


class IllegalAction(VisaVisError, ValueError):
    pass


class ParseError(VisaVisError, ValueError):
    pass


class BudgetExceeded(VisaVisError, RuntimeError):
    pass


class LimitExceeded(VisaVisError, RuntimeError):
    pass


class ShapeMismatch(VisaVisError, ValueError):
    pass


class NonFiniteGradient(VisaVisError, FloatingPointError):
    """Raised when a gradient step would produce NaN/Inf.

    ``term`` names the offending loss component or parameter tensor.
    """

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class VersionMismatch(VisaVisError, ValueError):
    pass


class CorruptCheckpoint(VisaVisError, ValueError):
    pass


class TerminalRoot(VisaVisError, ValueError):
    pass


class EmptyVisits(VisaVisError, ValueError):
    pass


class DistributionMismatch(VisaVisError, ValueError):
    pass


class ConfigInvalid(VisaVisError, ValueError):
    """Configuration failed validation; ``errors`` maps field -> message."""

    def __init__(self, errors):
        self.errors = dict(errors)
        detail = "; ".join(f"{k}: {v}" for k, v in self.errors.items())
        super().__init__(f"invalid configuration: {detail}")
