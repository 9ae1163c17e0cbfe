"""Exception hierarchy shared by every module.

The CLI maps each class to a distinct exit code, so library code should raise
the most specific one that applies.
"""

from __future__ import annotations


class SelfInteractError(Exception):
    """Base class for all package errors."""


class ValidationError(SelfInteractError, ValueError):
    """An input violates a documented precondition.

    ``condition`` names the violated precondition so callers (and the CLI)
    can report it without parsing the message.
    """

    def __init__(self, condition: str, message: str | None = None):
        self.condition = condition
        super().__init__(f"{condition}: {message}" if message else condition)


class ConvergenceError(SelfInteractError, RuntimeError):
    """An iterative method ran out of iterations before meeting its tolerance."""

    def __init__(self, condition: str, residual: float, message: str | None = None):
        self.condition = condition
        self.residual = float(residual)
        text = f"{condition}: residual {self.residual:.3e}"
        super().__init__(f"{text} ({message})" if message else text)


class InfeasibleError(SelfInteractError):
    """No pair measure with the requested marginals lives on the allowed support."""

    def __init__(self, condition: str, message: str | None = None):
        self.condition = condition
        super().__init__(f"{condition}: {message}" if message else condition)
