"""Exception hierarchy shared by the solver, model, calibration and CLI layers."""

from __future__ import annotations


class CvMarketError(Exception):
    """Base class; ``payload`` is what the CLI serialises on failure."""

    def payload(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


# --- complementarity solver -------------------------------------------------

class LcpError(CvMarketError):
    pass


class DimensionMismatch(LcpError):
    pass


class SingularFreeBlock(LcpError):
    pass


class RayTermination(LcpError):
    """Lemke left along a secondary ray: no solution was found."""


class PivotLimitExceeded(LcpError):
    pass


class ToleranceNotMet(LcpError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


# --- market model -----------------------------------------------------------

class ModelError(CvMarketError):
    pass


class InvalidAnchor(ModelError):
    pass


class MissingAnchor(ModelError):
    pass


class UnreachableService(ModelError):
    pass


class InfeasibleBounds(ModelError):
    pass


class LabelMissing(ModelError):
    pass


class InvariantViolation(ModelError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field

    def payload(self) -> dict:
        out = super().payload()
        if self.field is not None:
            out["field"] = self.field
        return out


# --- calibration ------------------------------------------------------------

class CalibrationError(CvMarketError):
    pass


class ZeroSales(CalibrationError):
    pass


class ZeroPrice(CalibrationError):
    pass


class NoActiveTrader(CalibrationError):
    pass


class AllSalesZero(CalibrationError):
    pass


class InconsistentData(CalibrationError):
    pass


class SolverFailure(CalibrationError):
    def __init__(self, message: str, trace: list | None = None):
        super().__init__(message)
        self.trace = trace or []

    def payload(self) -> dict:
        out = super().payload()
        out["iterations"] = len(self.trace)
        return out


class MaxIterationsExceeded(CalibrationError):
    def __init__(self, message: str, trace: list | None = None):
        super().__init__(message)
        self.trace = trace or []

    def payload(self) -> dict:
        out = super().payload()
        out["iterations"] = len(self.trace)
        return out


# --- input files ------------------------------------------------------------

class InputError(CvMarketError):
    pass


class ParseError(InputError):
    pass


class SchemaError(InputError):
    pass
