"""Exception types shared across the pipeline."""


class RfepsError(Exception):
    """Base class for all package errors."""


class InvalidInput(RfepsError):
    """Input violates a precondition (empty cloud, too few points, ...)."""


class DegenerateInput(RfepsError):
    """Input is formally valid but geometrically degenerate."""


class Infeasible(RfepsError):
    """The constraint system of an optimization problem has no feasible point."""


class NumericalFailure(RfepsError):
    """A non-finite objective or gradient value was met at a feasible iterate."""


class DuplicateSite(RfepsError):
    """Two power-diagram sites coincide with equal weights."""


class NonManifoldOutput(RfepsError):
    """Dual-mesh cleanup could not produce a manifold surface."""

    def __init__(self, message, sites=None):
        super().__init__(message)
        self.sites = list(sites) if sites is not None else []
