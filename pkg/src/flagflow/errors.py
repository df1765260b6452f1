"""Exception hierarchy shared by all flagflow modules."""

__all__ = [
    "FlagflowError",
    "SingularMatrix",
    "NotHermitian",
    "InvalidDimension",
    "InvalidStep",
    "DimensionMismatch",
    "StepTooLarge",
    "OutsideChart",
    "DegenerateStep",
    "BoundaryContact",
    "IrreparableState",
    "Unsupported",
    "ChartMismatch",
    "SingularBlock",
    "NoConvergence",
    "LengthMismatch",
    "ConfigInvalid",
    "RuntimeFailure",
]


class FlagflowError(Exception):
    """Base class of every error raised by the library."""


class SingularMatrix(FlagflowError):
    """A matrix failed an invertibility or eigenvalue-floor test."""


class NotHermitian(FlagflowError):
    """Input expected to be Hermitian is not, within tolerance."""


class InvalidDimension(FlagflowError):
    """A dimension argument is out of range."""


class InvalidStep(FlagflowError):
    """A time step is not strictly positive."""


class DimensionMismatch(FlagflowError):
    """Operands have incompatible shapes."""


class StepTooLarge(FlagflowError):
    """A phase or geometric guard detected a step that must be refined."""


class OutsideChart(FlagflowError):
    """A bottom-row block is too close to singular for the affine chart."""


class DegenerateStep(FlagflowError):
    """Finite-difference step outside the admissible range."""


class BoundaryContact(FlagflowError):
    """A Jacobi state touched the boundary of the Hermitian simplex."""


class IrreparableState(FlagflowError):
    """A simplex state is too far from the simplex to be repaired."""


class Unsupported(FlagflowError):
    """The requested parameter combination is not implemented."""


class ChartMismatch(FlagflowError):
    """Two chart points carry different dimensions."""


class SingularBlock(FlagflowError):
    """A block determinant is below its guard."""


class NoConvergence(FlagflowError):
    """An iterative estimator failed to converge.

    Parameters
    ----------
    message : str
        Human-readable reason.
    fallback : object, optional
        The best available estimate (for example the initialisation values).
    """

    def __init__(self, message, fallback=None):
        super().__init__(message)
        self.fallback = fallback


class LengthMismatch(FlagflowError):
    """Paired sequences differ in length."""


class ConfigInvalid(FlagflowError):
    """An experiment configuration failed validation."""


class RuntimeFailure(FlagflowError):
    """An experiment could not produce trustworthy estimates.

    Parameters
    ----------
    message : str
        Human-readable reason.
    diagnostics : dict, optional
        Flagged-path counts and reasons.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
