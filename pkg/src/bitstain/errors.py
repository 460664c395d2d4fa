"""Exception hierarchy shared across the package."""


class BitStainError(Exception):
    pass


class ParameterError(BitStainError, ValueError):
    pass


class ShapeError(BitStainError, ValueError):
    pass


class ConfigError(BitStainError, ValueError):
    pass


class StateError(BitStainError, RuntimeError):
    pass


class NumericError(BitStainError, ArithmeticError):
    pass


class VolumeIOError(BitStainError, OSError):
    pass


class UndefinedMetricError(BitStainError, ValueError):
    """A metric has no meaningful value for the given inputs (e.g. empty foreground)."""


class PhantomGenerationError(BitStainError, RuntimeError):
    def __init__(self, message, placed):
        super().__init__(message)
        self.placed = placed


class MissingPrototypeError(StateError):
    pass


class NonFiniteLossError(NumericError):
    def __init__(self, component, value, step=None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss component {component!r}{where}: {value}")
        self.component = component
        self.value = value
        self.step = step
