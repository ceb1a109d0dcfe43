"""Exception hierarchy shared by the solvers."""


class LQError(Exception):
    """Base class for every error raised by this package."""


class ModelStructureError(LQError, ValueError):
    """Inconsistent dimensions in a model or signal set."""


class RegularityError(LQError):
    """R + D'PD lost positive definiteness."""


class BlowUpError(LQError):
    """An integrator produced non-finite values."""

    def __init__(self, message, last_good_time=None):
        super().__init__(message)
        self.last_good_time = last_good_time


class NotStabilizableError(LQError):
    """The Riccati continuation did not converge before the horizon cap."""


class NumericalIntegrityError(LQError):
    """A property guaranteed by theory failed beyond numerical tolerance."""


class CertificateError(NumericalIntegrityError):
    """No positive definite Lyapunov certificate could be produced."""


class HorizonTooShortError(LQError):
    """The grid does not reach the lag at which the perturbed Lyapunov bound holds."""


class PaddingError(LQError):
    """Signals do not permit a certified padded horizon."""
