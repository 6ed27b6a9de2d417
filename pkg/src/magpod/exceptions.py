"""Exception and warning types shared across the package."""


class MagpodError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatchError(MagpodError, ValueError):
    """Operand shapes are inconsistent."""


class NotSymmetricError(MagpodError, ValueError):
    """A matrix required to be symmetric is not, beyond tolerance."""


class NotPositiveDefiniteError(MagpodError):
    """Factorization hit a non-positive pivot; caller may retry with jitter."""


class EigenConvergenceError(MagpodError):
    """The symmetric eigensolver failed to converge."""


class DegenerateElementError(MagpodError):
    """The mapped mesh has a non-positive Jacobian determinant somewhere."""


class NewtonDivergenceError(MagpodError):
    """Newton residual failed to decrease over several damped steps."""


class SingularTangentError(MagpodError):
    """Tangent factorization failed even after jitter escalation."""


class ZeroReferenceError(MagpodError, ValueError):
    """A relative metric was requested against a zero reference."""


class NegativeVarianceError(MagpodError):
    """Predicted variance fell below the round-off clipping band."""


class FitFailedError(MagpodError):
    """Every hyperparameter start failed to produce a usable model."""


class SequenceExhaustedError(MagpodError):
    """Feasibility rate too low to reach the requested design size."""


class UnsupportedDimensionError(MagpodError, ValueError):
    """Requested dimension outside the supported range."""


class RankDeficientWarning(UserWarning):
    """Requested basis size exceeds numerical rank; basis was capped."""
