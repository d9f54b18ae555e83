"""Exception types shared across the package."""


class OtthomError(Exception):
    """Base class for all package errors."""


class ConfigError(OtthomError):
    pass


class GraphMismatch(OtthomError):
    pass


class MassMismatch(OtthomError):
    pass


class NonpositiveEps(OtthomError):
    pass


class DegenerateEdge(OtthomError):
    pass


class EmptyGraphInBox(OtthomError):
    pass


class NegativeInput(OtthomError):
    pass


class NegativeDensity(OtthomError):
    pass


class ContinuityViolation(OtthomError):
    pass


class IsolatedVertexInSupport(OtthomError):
    pass


class NoVertexInBall(OtthomError):
    def __init__(self, point):
        self.point = point
        super().__init__(f"no graph vertex within reach of lattice point {point}")


class PathTooLong(OtthomError):
    pass


class NonadjacentStep(OtthomError):
    pass


class UnmappedPair(OtthomError):
    pass


class UnbalancedDivergence(OtthomError):
    pass


class NoTubePath(OtthomError):
    pass


class Infeasible(OtthomError):
    pass


class DisconnectedSupports(OtthomError):
    pass


class CEResidualTooLarge(OtthomError):
    pass


class NegativeDepot(OtthomError):
    pass


class SeamMismatch(OtthomError):
    pass


class GapInfeasible(OtthomError):
    pass


class DegenerateTriangulation(OtthomError):
    pass
