"""Exception hierarchy shared by all modules."""


class StochVolterraError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(StochVolterraError, ValueError):
    """Invalid argument, configuration or data shape."""


class NumericalError(StochVolterraError, ArithmeticError):
    """A numerical procedure failed to produce a usable result."""


class DivergenceError(NumericalError):
    """Time integration produced a non-finite state."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"integration diverged at step {step}")


class InstabilityError(NumericalError):
    """Filter coefficients outside the stability region."""


class EstimationError(NumericalError):
    """Modal parameter estimation could not find an identifiable peak."""


class IllPosedError(NumericalError):
    """Least-squares problem is rank deficient."""

    def __init__(self, rank: int, n_cols: int, message: str | None = None):
        self.rank = rank
        self.n_cols = n_cols
        super().__init__(message or f"design matrix is rank deficient: numerical rank {rank} < {n_cols} columns")


class EnsembleError(NumericalError):
    """Too many Monte Carlo realizations failed."""
