"""Exception and warning types shared across the package."""


class BalanceGaugeError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class SchemaError(BalanceGaugeError, ValueError):
    """Input file does not match the expected layout."""

    exit_code = 3


class PanelValidationError(BalanceGaugeError, ValueError):
    """Panel data violates a structural invariant (e.g. non-monotone censoring)."""

    exit_code = 3


class DomainError(BalanceGaugeError, ValueError):
    """Argument outside the domain of an operation."""

    exit_code = 2


class NumericalError(BalanceGaugeError, ArithmeticError):
    exit_code = 4


class DegenerateResponseError(NumericalError):
    """Response has no variation (all-0/all-1 outcome, or constant OLS target)."""


class RankDeficiencyError(NumericalError):
    """Design matrix is rank deficient after filtering."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class DegenerateGroupError(NumericalError):
    """A treatment group is empty or carries no weight."""


class DegenerateCovariateError(NumericalError):
    """Covariate has zero pooled variance."""


class NumericalWarning(UserWarning):
    """Non-fatal numerical issue (clipped probabilities, pseudo-inverse, ...)."""


class PolicyWarning(UserWarning):
    """Usage that is legal but discouraged (e.g. stabilized weights for balance)."""
