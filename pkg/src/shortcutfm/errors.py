"""Exception hierarchy shared by all modules.

Each class maps to one CLI exit code (see ``cli.EXIT_CODES``).
"""


class ShortcutError(Exception):
    """Base class for package errors."""


class ConfigError(ShortcutError, ValueError):
    """Invalid configuration or unknown option."""


class DomainError(ShortcutError, ValueError):
    """Input lies outside the domain where a quantity is defined."""


class ContractError(ShortcutError, ValueError):
    """Shape mismatch or violated call precondition."""


class StateError(ShortcutError, RuntimeError):
    """Operation called in the wrong state (e.g. backward before forward)."""


class FormatError(ShortcutError, ValueError):
    """Malformed or incompatible checkpoint / data file."""


class NumericalError(ShortcutError, ArithmeticError):
    """Non-finite values during training or inference."""


class TrainingError(NumericalError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class InferenceError(NumericalError):
    def __init__(self, message, step=None, nfe=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
        self.nfe = nfe
