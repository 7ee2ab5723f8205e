"""Exception types shared across the package."""


class OutOfDomainError(ValueError):
    """A query point lies outside the closed computational rectangle."""


class InvalidCoefficientError(ValueError):
    """A coefficient field violates a sign or bound requirement."""


class SingularSystemError(RuntimeError):
    """Sparse factorization failed; ``pivot`` carries the reported location."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class NonconvergenceError(RuntimeError):
    """An iterative solver exhausted its iteration budget.

    ``residuals`` holds the residual-norm history for diagnosis.
    """

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals) if residuals is not None else []


class StalledLineSearchError(RuntimeError):
    """Backtracking produced no acceptable step within the allowed trials."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class ConfigError(ValueError):
    """Malformed or unknown configuration input."""
