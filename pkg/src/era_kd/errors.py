"""Exception hierarchy shared by every module in the package."""


class EraError(Exception):
    """Base class for all package errors."""


class DimensionError(EraError, ValueError):
    pass


class ParameterError(EraError, ValueError):
    pass


class ContractError(EraError, ValueError):
    pass


class InputError(EraError, ValueError):
    pass


class SpecError(EraError, ValueError):
    pass


class ConfigError(EraError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class TapeStateError(EraError, RuntimeError):
    pass


class StateError(EraError, RuntimeError):
    pass


class NumericError(EraError, ArithmeticError):
    """Raised instead of letting NaN/Inf propagate.

    ``term`` names the loss term being evaluated when known.
    """

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class DataIOError(EraError, OSError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class TopologyError(EraError, ValueError):
    pass
