"""Exception hierarchy.

Every error raised by the library derives from :class:`CutoffLabError`.  The
three intermediate classes map onto the CLI exit codes: configuration
problems (2), numerical failures (3) and invariant violations (4).
"""


class CutoffLabError(Exception):
    exit_code = 1


class ConfigError(CutoffLabError, ValueError):
    """Invalid user input: bad configuration, preconditions, dimensions."""

    exit_code = 2


class NumericalError(CutoffLabError, ArithmeticError):
    """A computation could not reach the requested accuracy or range."""

    exit_code = 3


class InvariantViolation(CutoffLabError, AssertionError):
    """A mathematical identity or bound that must hold was found violated."""

    exit_code = 4


# -- configuration / precondition errors ---------------------------------------

class DomainError(ConfigError):
    pass


class UnsupportedDimensionError(ConfigError):
    pass


class ModelError(ConfigError):
    pass


class ParameterError(ConfigError):
    pass


class PreconditionError(ConfigError):
    pass


class IncompatibleGridError(ConfigError):
    pass


class ExceptionalInitialConditionError(ConfigError):
    """The asymptotic direction vanishes, so the cutoff profile is undefined."""


class InsufficientSampleError(ConfigError):
    pass


# -- numerical failures ----------------------------------------------------------

class AccuracyError(NumericalError):
    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class StiffnessError(NumericalError):
    pass


class NumericalRangeError(NumericalError):
    pass


class IntegratorError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class StepSizeError(NumericalError):
    pass


class BandwidthError(NumericalError):
    pass


# -- invariant violations --------------------------------------------------------

class IdentityViolationError(InvariantViolation):
    pass


class CoercivityViolation(InvariantViolation):
    pass
