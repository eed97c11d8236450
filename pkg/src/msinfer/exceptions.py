"""Exception and warning types raised across the package."""


class MultiscaleError(Exception):
    """Base class for all errors raised by msinfer."""


class ConfigError(MultiscaleError, ValueError):
    """Invalid user configuration."""


class NumericalError(MultiscaleError, ArithmeticError):
    """Base class for numerical failures."""


# transport
class NonMonotonePoint(NumericalError):
    pass


class InfeasibleStart(NumericalError):
    pass


class MaxIterations(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class BracketFailure(NumericalError):
    pass


class CovarianceNotPD(NumericalError):
    pass


class ClippedEigenvalueWarning(UserWarning):
    pass


# msfem
class SingularSystem(NumericalError):
    pass


class RankSurprise(UserWarning):
    pass


# sampler
class NonFiniteLogDensity(NumericalError):
    pass


class NonFiniteGradient(NumericalError):
    pass


class LineSearchFailure(NumericalError):
    pass


class TooFewReplicates(MultiscaleError, ValueError):
    pass


# engine
class DegenerateBudget(NumericalError):
    pass


class SingularFit(NumericalError):
    pass


class PipelineError(MultiscaleError):
    """Wraps a failure with the pipeline stage it occurred in."""

    def __init__(self, stage, cause):
        super().__init__(f"pipeline stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# diagnostics
class EmptySampleSet(MultiscaleError, ValueError):
    pass
