"""Exception hierarchy shared by all subpackages."""


class GpCcOpfError(Exception):
    """Base class for every error raised by the toolkit."""


class ParseError(GpCcOpfError):
    """Malformed case text. Carries the offending line and field when known."""

    def __init__(self, message, line=None, field=None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field is not None:
            location.append(f"field {field!r}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.line = line
        self.field = field


class ValidationError(GpCcOpfError):
    """A case, config or distribution violates one of its invariants."""


class SpecMismatch(GpCcOpfError):
    """An output spec references elements absent from the case."""


class NonConvergence(GpCcOpfError):
    """Newton iteration hit its cap. ``solution`` holds the last iterate."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class SingularJacobian(GpCcOpfError):
    """The power-flow Jacobian could not be factorized."""


class DegenerateCase(GpCcOpfError):
    """Sampling produced a zero generation total and cannot be rescaled."""


class TooManyFailures(GpCcOpfError):
    """Too large a fraction of sampled operating points failed to solve."""


class FactorizationFailure(GpCcOpfError):
    """Gram matrix stayed indefinite after all jitter escalations."""


class AllRestartsFailed(GpCcOpfError):
    """Every hyperparameter optimization restart failed."""


class InvalidAlpha(ValidationError):
    """Participation factors are negative or do not sum to one."""


class DomainError(GpCcOpfError, ValueError):
    """Argument outside the mathematical domain of a function."""


class PropagationFailure(GpCcOpfError):
    """Uncertainty propagation produced non-finite moments."""


class MaxIterations(GpCcOpfError):
    """Optimizer stopped at its iteration cap."""


class InfeasibleSubproblem(GpCcOpfError):
    """Constraints cannot be met; ``binding`` lists the offending constraints."""

    def __init__(self, message, binding=()):
        super().__init__(message)
        self.binding = list(binding)
