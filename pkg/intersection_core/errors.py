from typing import Any


class IntersectionError(Exception):
    """Base class for every error raised by the coordination stack."""


class InvalidParameterError(IntersectionError, ValueError):
    pass


class OutOfHorizonError(InvalidParameterError):
    pass


class UnreachableError(IntersectionError):
    pass


class InvariantViolationError(IntersectionError):
    pass


class NoFeasibleCrossingError(IntersectionError):
    pass


class UndefinedGradientError(IntersectionError):
    pass


class BoundaryHessianError(IntersectionError):
    pass


class ProtocolError(IntersectionError):
    pass


class LinearizationInfeasibleError(IntersectionError):
    pass


class ScenarioError(IntersectionError, ValueError):
    pass


class DiagnosticError(IntersectionError):
    """Error that carries a diagnostics mapping for the caller's log."""

    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class NonDescentError(DiagnosticError):
    pass


class LinesearchFailureError(DiagnosticError):
    pass


class RoundFailureError(DiagnosticError):
    pass
