"""Exception types shared across the package.

Every error raised on a contract violation derives from BiharmError so
callers (and the CLI) can distinguish domain errors from programming bugs.
"""


class BiharmError(Exception):
    """Base class for all package-level contract violations."""


class DimensionMismatch(BiharmError):
    """Inputs disagree about the ambient or target dimension."""


class EmptyInterior(BiharmError):
    """Lattice resolution too coarse: no node survives the clamp band."""


class StencilOutOfDomain(BiharmError):
    """A finite-difference stencil reaches outside the non-exterior set."""


class RegionEscapesDomain(BiharmError):
    """A requested ball or shell leaves the non-exterior node set."""


class Disconnected(BiharmError):
    """No lattice path joins the requested nodes."""


class NearZeroVector(BiharmError):
    """Renormalization hit a vector with norm below the guard threshold."""


class CenterOnNode(BiharmError):
    """A map center coincides with a lattice node where it must not."""


class InvalidCenter(BiharmError):
    """Projection center violates |a| <= 1/2."""


class AllCentersDegenerate(BiharmError):
    """Every sampled projection center was skipped as near-degenerate."""


class UnbalancedDegrees(BiharmError):
    """Singularity degrees do not cancel; no perfect matching exists."""


class AmbiguousDegree(BiharmError):
    """Flux residual too large to round to an integer degree."""


class ConfigError(BiharmError):
    """Run configuration failed schema validation."""


class FieldFileError(BiharmError):
    """A field file is truncated, malformed, or self-inconsistent."""
