"""Exception types shared across the package."""

from __future__ import annotations


class DdopfError(Exception):
    """Base class for all package-specific errors."""


# --- grid topology ---------------------------------------------------------


class CycleDetected(DdopfError):
    """The grid graph contains a cycle (must be radial)."""

    def __init__(self, cycle_edges):
        self.cycle_edges = tuple(cycle_edges)
        super().__init__(f"grid contains a cycle through edges {self.cycle_edges}")


class Disconnected(DdopfError):
    """The grid graph is not connected."""

    def __init__(self, components):
        self.components = tuple(tuple(sorted(c)) for c in components)
        super().__init__(f"grid is disconnected; components: {self.components}")


class EdgeOrderViolation(DdopfError):
    """Edge list is not in the canonical lexicographic order."""

    def __init__(self, index):
        self.index = index
        super().__init__(f"edge list out of canonical order at position {index}")


class UnknownNode(DdopfError):
    """A node id is not part of the grid."""


# --- numerics / dimensions -------------------------------------------------


class DimensionMismatch(DdopfError):
    """A vector or matrix does not have the expected shape."""


class NonpositiveVoltage(DdopfError):
    """Voltage magnitudes must be strictly positive."""


class NoConvergence(DdopfError):
    """Iterative solve hit its iteration limit without meeting tolerance."""

    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"no convergence after {iterations} iterations (residual {residual:.3e})"
        )


class AngleOutOfTrustRegion(DdopfError):
    """A requested flow needs an angle outside the configured trust region."""


# --- behavioral representation --------------------------------------------


class OrderTooLarge(DdopfError):
    """Requested Hankel order exceeds the sequence length."""


class InconsistentQuery(DdopfError):
    """Query vector lies outside the span of the stored lifted-input data."""


class ModelNotPE(DdopfError):
    """Lifted-input data is not persistently exciting of order 1."""


class ExcitationFailed(DdopfError):
    """Could not generate a persistently exciting trajectory."""


class SchemaError(DdopfError):
    """A data or configuration file does not match its documented schema."""

    def __init__(self, message, column=None):
        self.column = column
        super().__init__(message if column is None else f"{message} (column: {column})")


# --- solver ----------------------------------------------------------------


class NumericalBreakdown(DdopfError):
    """Interior-point iteration stalled before reaching a certificate."""

    def __init__(self, iteration, detail=""):
        self.iteration = iteration
        super().__init__(f"numerical breakdown at iteration {iteration}" + (f": {detail}" if detail else ""))


class TooManyBinaries(DdopfError):
    """Enumeration requested over more combinations than the configured cap."""


class ProjectionInfeasible(DdopfError):
    """Circle projection left the application constraints violated."""


# --- microgrid -------------------------------------------------------------


class ForecastTooShort(DdopfError):
    """Profile window does not cover the prediction horizon."""


class StateBoundViolation(DdopfError):
    """Stored energy left its hard bounds beyond tolerance."""


class InfeasibleProfile(DdopfError):
    """Requested demand exceeds what the unit fleet can ever supply."""
