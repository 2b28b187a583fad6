"""Exception types shared across the package."""


class RtirlError(RuntimeError):
    """Base class for all package-specific errors."""


class NonFiniteError(RtirlError):
    """A numerical evaluation produced NaN or infinity."""


class DimensionMismatchError(RtirlError):
    """Inputs are not dimensionally consistent with the problem layout."""


class QpError(RtirlError):
    """Base class for QP solver failures."""


class QpInfeasibleError(QpError):
    """No point satisfies the QP constraints."""


class QpNonConvexError(QpError):
    """The QP Hessian is not positive definite on the equality null space."""


class IterationLimitError(RtirlError):
    """An iterative solver hit its iteration budget.

    Carries the last residual (if known) in ``residual``.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ActiveSetAmbiguousError(RtirlError):
    """A constraint is tight with (numerically) zero multiplier, so the
    active set cannot be inferred reliably."""


class SingularKktError(RtirlError):
    """The active-set KKT matrix is singular (LICQ/SOSC failure)."""


class StrictComplementarityError(RtirlError):
    """Strict complementarity is violated at the point being differentiated."""


class TrainingAbortedError(RtirlError):
    """Training aborted after repeated numerical failures.

    ``step`` names the training step at which the abort was triggered.
    """

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step
