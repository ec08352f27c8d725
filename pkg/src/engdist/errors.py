"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes (validation 2, data 3,
convergence/divergence 4).
"""


class EngdistError(Exception):
    """Base class for all package errors."""


class ValidationError(EngdistError):
    """Invalid inputs, configuration, or shape mismatches."""


class DataFormatError(EngdistError):
    """Malformed or internally inconsistent logged data or files."""


class ConvergenceError(EngdistError):
    """Fixed-point iteration exhausted its sweep budget.

    Carries the distance trace observed so far in ``trace``.
    """

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = list(trace)


class TrainingDivergedError(EngdistError):
    """Training produced a non-finite loss; ``step`` is the 1-based step index."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step
