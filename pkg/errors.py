"""Exceptions raised by the simulation and verification modules.

Every error is a ValueError so callers that only guard against bad input
keep working; the CLI maps them onto exit codes.
"""


class IBPError(ValueError):
    """Base class for all library errors."""


class DomainError(IBPError):
    """A point is off the manifold or a field is not a section of I(X)."""


class StepSizeError(IBPError):
    """A step leaves the retraction domain or an integrator is unstable."""


class RankDegeneracyError(IBPError):
    """Numerical rank of X(x) is ambiguous or not constant."""


class UnsupportedOperationError(IBPError):
    """The requested derivative is not available for this field."""


class PreconditionError(IBPError):
    """An operation was requested outside its documented precondition."""


class GridError(IBPError):
    """Evaluation times or paths do not share the simulation grid."""


class UnsupportedScenarioError(IBPError):
    """The scenario does not satisfy a structural hypothesis of the check."""


class ScenarioNotFoundError(IBPError):
    def __init__(self, name, hints=()):
        self.name = name
        self.hints = list(hints)
        message = f"unknown scenario '{name}'"
        if self.hints:
            message += f" (did you mean: {', '.join(self.hints)}?)"
        super().__init__(message)


class UsageError(IBPError):
    """Invalid command line or run configuration."""
