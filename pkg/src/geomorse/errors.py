"""Exception hierarchy.

Every failure raised by the library derives from :class:`GeomorseError`, so
callers can catch one type at the CLI boundary while tests assert the precise
subclass.
"""


class GeomorseError(Exception):
    """Base class for all library errors."""


class ConstraintViolationError(GeomorseError, ValueError):
    """A point that should lie on the surface does not."""


class ProjectionAmbiguityError(GeomorseError, ValueError):
    """An ambient point is too far from the surface for a unique projection."""


class UnsupportedSurfaceError(GeomorseError, TypeError):
    """The operation is not defined for this kind of surface."""


class ResolutionError(GeomorseError, ValueError):
    """A curve resolution below the supported minimum was requested."""


class DegenerateCurveError(GeomorseError, ValueError):
    """The curve is empty or collapsed to a point where a loop is required."""


class StepSizeError(GeomorseError, ValueError):
    """A flow step exceeds the stability bound."""


class EmbeddednessLossError(GeomorseError, RuntimeError):
    """A flowed curve developed a self-intersection."""


class FamilyFlowError(GeomorseError, RuntimeError):
    """A member of a curve family failed to flow."""

    def __init__(self, index, cause):
        super().__init__(f"member {index} failed: {cause}")
        self.index = index
        self.cause = cause


class CoreNotGeodesicError(GeomorseError, ValueError):
    """A curve used as a geodesic core has non-negligible curvature."""


class TubeTooWideError(GeomorseError, ValueError):
    """The requested tube reaches a focal point (J vanishes)."""


class OutOfTubeError(GeomorseError, ValueError):
    """A point or curve leaves the tubular neighbourhood of a chart."""


class InfeasibleBumpError(GeomorseError, ValueError):
    """No bump amplitude satisfies the requested parameters."""


class BoundViolationError(GeomorseError, AssertionError):
    """A numerically evaluated bound that should hold by construction failed."""


class NoUnstableDirectionError(GeomorseError, ValueError):
    """A local min-max family needs a geodesic of positive index."""


class DegenerateGeodesicError(GeomorseError, ValueError):
    """The geodesic has a nontrivial Jacobi field (positive nullity)."""


class StationaryStartError(GeomorseError, ValueError):
    """A gradient-type flow was started at a critical point."""


class UnresolvedLimitError(GeomorseError, RuntimeError):
    """A min-max limit did not converge to a geodesic."""


class StageError(GeomorseError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
