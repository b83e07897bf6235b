"""Exception hierarchy shared by all kernelscope modules."""


class KernelscopeError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(KernelscopeError, ValueError):
    """Invalid system or run configuration."""


class UsageError(KernelscopeError, ValueError):
    """Inputs with incompatible shapes, sizes or modes."""


class NumericError(KernelscopeError, ArithmeticError):
    """A kernel produced a non-finite value at finite states."""

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class DivergenceError(KernelscopeError, ArithmeticError):
    """Integration produced a non-finite state."""

    def __init__(self, message, time=None, trajectory=None):
        super().__init__(message)
        self.time = time
        self.trajectory = trajectory


class ConditioningError(KernelscopeError, ArithmeticError):
    """A least-squares or normal-equation system is numerically singular."""

    def __init__(self, message, condition=None, empty=None):
        super().__init__(message)
        self.condition = condition
        self.empty = empty
