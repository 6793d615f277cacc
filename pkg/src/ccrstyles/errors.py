"""Exception hierarchy shared by every module of the package."""


class CcrError(Exception):
    """Base class for all package errors."""


class DomainError(CcrError, ValueError):
    """A model parameter lies outside its admissible domain."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NonPsdCorrelation(DomainError):
    """The market/credit correlation matrix is not positive semi-definite."""


class NonFinitePayoff(CcrError, ArithmeticError):
    """A payoff functional returned NaN or an infinity on some path."""


class QuadratureFailure(CcrError, RuntimeError):
    """Adaptive quadrature exhausted its budget without meeting tolerance."""


class DegeneratePool(CcrError, ValueError):
    """Tranche premium leg is not positive: the tranche is wiped out."""


class SimulationError(CcrError, RuntimeError):
    """Path generation could not produce an admissible scenario."""


class UnsupportedStyle(CcrError, ValueError):
    """The requested operation is not defined for this structuring style."""


class ConfigParse(CcrError, ValueError):
    """A run configuration file could not be parsed."""
