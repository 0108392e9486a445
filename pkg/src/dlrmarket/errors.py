"""Exception hierarchy shared by all modules."""


class DLRMarketError(Exception):
    """Base class for every error raised by the package."""


# thermal
class NonPhysicalInput(DLRMarketError, ValueError):
    pass


class InfeasibleRating(DLRMarketError):
    """Solar gain exceeds cooling at the temperature limit (negative radicand)."""


class DivisionGuard(DLRMarketError, ZeroDivisionError):
    """A ratio is undefined at the given operating point (e.g. zero current)."""


class UnstableStep(DLRMarketError):
    pass


# uncertainty
class IndexMismatch(DLRMarketError, ValueError):
    pass


class DominanceViolated(DLRMarketError):
    def __init__(self, line, lhs, rhs):
        self.line, self.lhs, self.rhs = line, lhs, rhs
        super().__init__(
            f"line {line!r}: wind-induced rating variance {lhs:.6g} exceeds "
            f"total rating variance {rhs:.6g}"
        )


# grid
class SchemaError(DLRMarketError, ValueError):
    pass


class ValidationError(DLRMarketError, ValueError):
    pass


class SingularNetwork(DLRMarketError):
    pass


class UnbalancedInjection(DLRMarketError, ValueError):
    pass


# conic core
class NegativeCurvature(DLRMarketError, ValueError):
    pass


class SolverError(DLRMarketError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals or {}


class Infeasible(SolverError):
    pass


class Unbounded(SolverError):
    pass


class NumericalFailure(SolverError):
    pass


# markets / analysis
class DegenerateDuals(DLRMarketError):
    pass


class SingularJacobian(DLRMarketError):
    pass


class NoConvergence(DLRMarketError):
    pass


class NoMarginalUnit(DLRMarketError):
    pass


class CaseMismatch(DLRMarketError, ValueError):
    pass
