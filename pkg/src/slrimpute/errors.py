"""Exception hierarchy shared by all modules."""


class SlrImputeError(Exception):
    """Base class for every error raised by this package."""

    module = "slrimpute"

    def __str__(self):
        return f"{self.module}: {super().__str__()}"


class DataError(SlrImputeError, ValueError):
    """Malformed or inconsistent trial data."""

    module = "dataset"


class NumericalError(SlrImputeError, ArithmeticError):
    """A numerical routine could not produce a valid result."""

    module = "linalg"


class RankDeficiencyError(NumericalError):
    """Design matrix does not have full column rank."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class InsufficientDataError(NumericalError):
    """Fewer usable observations than coefficients."""


class NotPositiveDefiniteError(NumericalError):
    """Cholesky factorization failed at a pivot."""

    def __init__(self, message, pivot):
        super().__init__(message)
        self.pivot = pivot


class ImputationError(SlrImputeError):
    module = "imputation"


class InferenceError(SlrImputeError):
    module = "inference"


class SimulationError(SlrImputeError):
    module = "simulation"
