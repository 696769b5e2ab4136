"""Exception hierarchy."""


class GnssFgError(Exception):
    """Base class for all library errors."""


# graph construction / evaluation
class DuplicateVariable(GnssFgError):
    pass


class DuplicateFactor(GnssFgError):
    pass


class DanglingEdge(GnssFgError):
    """A factor references a variable that is not in the graph."""


class BadNoiseModel(GnssFgError):
    """Noise covariance is not symmetric positive definite."""


class ArityError(GnssFgError):
    pass


class IncompleteEstimate(GnssFgError):
    pass


class UnknownVariable(GnssFgError):
    pass


# models
class DegenerateGeometry(GnssFgError):
    """Receiver and satellite coincide, so the line of sight is undefined."""


class MissingObservable(GnssFgError):
    pass


class EpochGapError(GnssFgError):
    pass


class GeometryError(GnssFgError):
    """No acceptable satellite constellation could be drawn."""


# solving
class SingularSystem(GnssFgError):
    pass


class SingularInnovation(GnssFgError):
    pass


class KernelMisuse(GnssFgError):
    pass


class EpochOrderError(GnssFgError):
    pass


class ConfigError(GnssFgError):
    pass
