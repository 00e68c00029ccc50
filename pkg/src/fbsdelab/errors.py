"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument violates an operation's precondition."""


class SimulationError(RuntimeError):
    """A simulated state or field became non-finite."""

    def __init__(self, message, step=None, path=None):
        super().__init__(message)
        self.step = step
        self.path = path


class RegressionError(RuntimeError):
    """A least-squares step could not be solved."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TransformRangeError(RuntimeError):
    """A value left the tabulated range of a linearizing transform."""
