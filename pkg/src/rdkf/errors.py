"""Exception hierarchy shared by the library and the command line."""


class RdkfError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(RdkfError, ValueError):
    """Invalid parameters or configuration (CLI exit code 2)."""


class InvalidGraphError(ConfigError):
    """Network does not satisfy the structural requirements."""


class NumericalError(RdkfError, ArithmeticError):
    """Numerical infeasibility (CLI exit code 3)."""


class NotPositiveDefiniteError(NumericalError):
    pass


class InfeasibleTiltError(NumericalError):
    """Exponential tilt destroys positive definiteness.

    In the least favorable construction this means the tolerance ``b`` is
    too large for the model: the ambiguity radius must be small enough that
    the tilted precision stays positive definite.
    """


class DivergenceError(NumericalError):
    """An iterative recursion failed to converge."""


class ProtocolError(RdkfError, RuntimeError):
    """Violation of the message exchange contract between nodes."""


class InvariantViolation(RdkfError, AssertionError):
    """A runtime invariant check fired."""
