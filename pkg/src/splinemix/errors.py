"""Exception types shared across the package."""


class SplinemixError(Exception):
    """Base class for package errors."""


class InvalidInputError(SplinemixError, ValueError):
    """Raised when inputs violate a documented precondition."""


class NumericError(SplinemixError, RuntimeError):
    """Raised when a numerical operation cannot proceed (singular matrix, ...).

    Carries an optional condition-number diagnostic for the offending matrix.
    """

    def __init__(self, message, condition_number=None):
        if condition_number is not None:
            message = f"{message} (condition number ~ {condition_number:.3e})"
        super().__init__(message)
        self.condition_number = condition_number


class DegenerateClassError(SplinemixError, RuntimeError):
    """Raised when every fit attempt collapsed a class below the minimum mass."""
