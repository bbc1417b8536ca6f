"""Exception types shared across the package."""


class GridFusionError(Exception):
    """Base class for all package-specific errors."""


class TotalConflict(GridFusionError):
    """Two evidence sources contradict each other almost entirely.

    Raised by mass combination when the normalizer 1 - K falls below the
    conflict tolerance.  The fusion pipeline maps this to an UNKNOWN reset.
    """


class AlreadyInitialized(GridFusionError):
    """A traffic area already owns a collective grid."""


class NoOverlap(GridFusionError):
    """Two footprints do not intersect with positive area."""


class NotInitialized(GridFusionError):
    """No collective grid exists for the requested traffic area."""


class NoPose(GridFusionError):
    """No self-reported pose is known for the requested vehicle."""


class OutOfOrder(GridFusionError):
    """A local grid arrived too far behind the collective's virtual time."""


class NegativeLatency(GridFusionError):
    """A latency sample would be negative (arrival before creation)."""


class SingularMatrix(GridFusionError):
    """A matrix required by the estimator is numerically singular."""


class GeometryMismatch(GridFusionError):
    """Two grids that must share geometry do not."""


class ConfigError(GridFusionError):
    """A scenario configuration is unreadable or geometrically impossible."""
