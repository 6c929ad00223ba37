"""Exception hierarchy shared across the package.

Every error carries a stable ``code`` (the class name) so the CLI can emit a
machine-readable payload without a lookup table.
"""

from __future__ import annotations


class MortprojError(Exception):
    """Base class for all package errors."""

    @property
    def code(self) -> str:
        return type(self).__name__

    def payload(self) -> dict:
        return {"error": self.code, "message": str(self)}


# core-data
class SchemaViolation(MortprojError):
    pass


class GridIncomplete(MortprojError):
    def __init__(self, key):
        self.key = key
        super().__init__(f"missing cell for key {key}")


class BadExposure(MortprojError):
    pass


class StdMismatch(MortprojError):
    pass


# smoking-backcast
class SingularFit(MortprojError):
    pass


class LagUnavailable(MortprojError):
    pass


# aad-covariate
class UndefinedAAD(MortprojError):
    pass


class DegenerateCovariate(MortprojError):
    pass


# model-spec
class NoBuiltinSpec(MortprojError):
    pass


class SpecSingular(MortprojError):
    pass


# mcmc-engine
class InitFailure(MortprojError):
    pass


class DiagnosticsUnavailable(MortprojError):
    pass


class ConvergenceWarning(UserWarning):
    pass


# model-selection
class DICFailure(MortprojError):
    pass


class MarginalUnstable(MortprojError):
    pass


# projection-engine
class BadHorizon(MortprojError):
    pass


class CovariateGap(MortprojError):
    pass


class ShareViolation(MortprojError):
    pass


# measures
class UndefinedRD(MortprojError):
    pass


class AggregationError(MortprojError):
    pass


class ScenarioUnsupported(MortprojError):
    pass


# simlab
class OracleFailure(MortprojError):
    pass
