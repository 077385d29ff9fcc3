"""Exception hierarchy shared by every rapsolve module."""


class RapError(Exception):
    """Base class for all rapsolve failures."""


class SpanError(RapError):
    """A requested time or window lies outside the available grid."""


class StiffnessError(RapError):
    """Step-size control underflowed while integrating a linear system."""

    def __init__(self, t, message=None):
        self.t = float(t)
        super().__init__(message or f"step size underflow near t={self.t:.6g}")


class DichotomyNotFound(RapError):
    """No positive exponent fits the sampled Green-kernel norms."""

    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)


class PreconditionError(RapError, ValueError):
    """An operation precondition was violated; the message echoes the bound."""


class HypothesisError(RapError):
    """One or more sufficient conditions failed; ``report`` carries both sides."""

    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)


class ConvergenceError(RapError):
    """A fixed-point iteration stopped without meeting its tolerance."""

    def __init__(self, message, iterate_norms=None):
        self.iterate_norms = list(iterate_norms or [])
        super().__init__(message)


class BallEscapeError(ConvergenceError):
    """A Picard iterate left the ball of admissible radius."""


class DomainError(RapError, ValueError):
    """A quadrature ball or probe set left the declared working domain."""


class ConditioningError(RapError):
    """A near-identity Jacobian became singular or ill-conditioned."""
