"""Exception and warning types raised across the package."""


class GrayBoxError(Exception):
    """Base class for all package errors."""


class StructureError(GrayBoxError, ValueError):
    """Inconsistent dimensions or malformed model structure."""


class ConfigError(GrayBoxError, ValueError):
    """Invalid configuration file or option."""


class ExcitationError(GrayBoxError):
    """Input signal is not persistently exciting for the requested depth."""


class DegenerateExtractionError(GrayBoxError):
    """The rank-one factor cannot be normalized (bottom-left entry ~ 0)."""


class NumericalFailure(GrayBoxError, ArithmeticError):
    """Non-finite values encountered during an iterative solve."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class IdentifiabilityWarning(UserWarning):
    """Parameter count violates the necessary identifiability condition."""


class StabilityWarning(UserWarning):
    """State matrix has spectral radius >= 1."""


class OrderSelectionWarning(UserWarning):
    """Weak singular-value gap at the requested model order."""


class ConditioningWarning(UserWarning):
    """Ill-conditioned similarity estimate, rank-deficient LS or rank-one fit."""
