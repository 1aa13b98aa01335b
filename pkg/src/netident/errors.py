"""Exception hierarchy for netident."""


class NetidentError(Exception):
    """Base class for all errors raised by this package."""


class StructureError(NetidentError, ValueError):
    """Dimensions or structural fields of a model/topology are inconsistent."""


class SingularityError(NetidentError):
    """A matrix or transfer function is singular where it must not be."""


class DegenerateSampleError(NetidentError):
    """A frequency sample is too close to a zero of a denominator."""


class AssumptionError(NetidentError):
    """A standing assumption (e.g. full row rank of J_eo) is violated."""


class StabilityError(NetidentError):
    """An operation requiring a stable matrix received an unstable one."""


class ConvergenceError(NetidentError):
    """An iterative solver failed to converge within its iteration cap."""


class ConditioningError(NetidentError):
    """A factorization is numerically singular."""


class EstimationError(NetidentError):
    """An estimation stage failed to produce a finite objective."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class GenerationError(NetidentError):
    """Random model generation exceeded its rejection cap."""
