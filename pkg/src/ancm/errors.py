"""Exception types raised across the package."""


class AncmError(Exception):
    """Base class for all package errors."""


class NonFiniteDynamics(AncmError):
    pass


class SingularMass(AncmError):
    pass


class Unmatched(AncmError):
    """Uncertainty does not lie in the span of the input matrix."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NotSymmetric(AncmError):
    pass


class MaxIterations(AncmError):
    """Barrier loop did not converge; ``best`` holds the best iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class Infeasible(AncmError):
    def __init__(self, message, margin=None):
        super().__init__(message)
        self.margin = margin


class EmptyDataset(AncmError):
    pass


class DivergedLoss(AncmError):
    pass


class GradientCheckFailed(AncmError):
    pass


class SingularHessian(AncmError):
    pass


class NonFiniteState(AncmError):
    """Integration produced a non-finite state; ``log`` holds the partial run."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class LineSearchFailed(AncmError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class ConfigError(AncmError):
    pass
