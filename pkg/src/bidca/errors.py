"""Exception hierarchy shared by every solver layer."""
from __future__ import annotations


class BidcaError(Exception):
    """Base class for all library errors."""


class NonFiniteInput(BidcaError, ValueError):
    """An oracle or constructor received NaN or infinite entries."""


class DimensionMismatch(BidcaError, ValueError):
    """Vector and box (or matrix) dimensions disagree."""


class SolverError(BidcaError):
    """Base class for numerical solver failures."""


class MaxIterations(SolverError):
    """Iteration budget exhausted (or progress stalled) before the tolerance was met.

    ``certificate`` optionally carries the best iterate reached, so callers
    with a weaker acceptance test of their own can still use it.
    """

    def __init__(self, message: str, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class Infeasible(SolverError):
    """The interior-point method could not find a feasible point."""


class NumericalBreakdown(SolverError):
    """The Newton system stayed singular despite regularization."""


class SubproblemFailure(SolverError):
    """A DC subproblem could not be solved to the required inexactness."""


class PenaltyUnbounded(SolverError):
    """The penalty parameter exceeded its ceiling."""


class LowerLevelInfeasible(SolverError):
    """The lower-level feasible set is empty at the requested upper variable."""


class StructureMissing(BidcaError, ValueError):
    """A nonsmooth term has no structural descriptor for slack reformulation."""


class AttestationMissing(BidcaError, ValueError):
    """The model did not declare that the partial-derivative formula applies."""


class DataError(BidcaError, ValueError):
    """Malformed input data; the message carries the line number when known."""


class ConfigError(BidcaError, ValueError):
    """Invalid experiment configuration."""
