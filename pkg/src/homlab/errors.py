"""Exception hierarchy for the homogenization laboratory."""


class HomLabError(Exception):
    """Base class for all laboratory errors."""


class ConfigError(HomLabError):
    """Invalid run configuration (bad invariants, missing files)."""


class SingularSample(HomLabError):
    """A nodal matrix sample is numerically singular (cond > 1e12)."""


class NonZeroMeanRHS(HomLabError):
    """Right-hand side of a periodic solve has a nonzero cell mean."""


class NonZeroMeanPotential(HomLabError):
    """Singular potential has a nonzero cell mean."""


class NoConvergence(HomLabError):
    """Iterative solver exhausted its iteration budget."""


class RankDeficientSymbol(HomLabError):
    """First-order symbol loses maximal rank on the unit sphere."""


class NonPositiveGroundState(HomLabError):
    """Computed periodic ground state changes sign (grid too coarse)."""


class DegenerateGroundState(HomLabError):
    """Spectral gap above the ground state is numerically zero."""


class IndivisibleEpsilon(HomLabError):
    """Grid step does not divide the oscillation period."""


class NotPositiveDefinite(HomLabError):
    """Assembled operator is not positive definite."""


class CalibrationDiverged(HomLabError):
    """Lower-bound shift calibration exceeded its search cap."""


class WindowExceedsMargin(HomLabError):
    """Smoothing window does not fit inside the extension margin."""


class NonConvergedSVD(HomLabError):
    """Lanczos iteration for the top singular value did not converge."""


class EigFailure(HomLabError):
    """Dense Hermitian eigendecomposition failed."""


class SolveFailure(HomLabError):
    """Direct sparse solve failed (singular shifted operator)."""


class TailTooLarge(HomLabError):
    """Contour truncation tail exceeds tolerance for the requested time."""


class TimeGridTooCoarse(HomLabError):
    """Sampled source term is too coarse for the requested accuracy."""


class EmptySubdomain(HomLabError):
    """Interior subdomain contains no grid nodes."""


class NonPositiveValue(HomLabError):
    """Log-log fit received a non-positive value."""


class ReportIncomplete(HomLabError):
    """A sweep cell failed; the report could not be completed."""


class UnsupportedDimension(HomLabError):
    """Operation is implemented for d = 1 only (d = 2 cell layer excepted)."""
