"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    pass


class InvalidDataError(ValueError):
    pass


class InvalidCoresetError(ValueError):
    pass


class BalanceInfeasibleError(ValueError):
    pass


class DecompositionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NumericalDivergence(FloatingPointError):
    """Raised when a flow pass leaves the finite / bounded region.

    ``block`` and ``step`` locate the failure; ``step`` is None when the
    failure happened in a refreshment or in the reverse pass.
    """

    def __init__(self, message, block=None, step=None):
        super().__init__(message)
        self.block = block
        self.step = step


class TrainingAborted(RuntimeError):
    pass
