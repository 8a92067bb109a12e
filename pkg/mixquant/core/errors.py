"""
Error hierarchy shared by every mixquant module
"""

from typing import Optional


class MixQuantError(Exception):
    """Base class for all errors raised by mixquant"""


class DimensionError(MixQuantError):
    """Operand shapes do not agree"""

    def __init__(self, message: str, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class ContractError(MixQuantError):
    """A precondition of an operation was violated"""


class DegenerateInputError(ContractError):
    """Input has no extent (or too little) along a reduced dimension"""


class NumericError(MixQuantError):
    """A non-finite value appeared where a finite one is required"""


class UnsupportedConfigurationError(MixQuantError):
    """The requested configuration is outside what the implementation supports"""


class ConfigError(MixQuantError):
    """Invalid configuration value"""

    def __init__(self, message: str, field_name: Optional[str] = None):
        self.field_name = field_name
        if field_name:
            message = f"{field_name}: {message}"
        super().__init__(message)


class ParseError(ConfigError):
    """Config text could not be parsed"""

    def __init__(self, message: str, line_number: int = 0, key: Optional[str] = None):
        self.line_number = line_number
        self.key = key
        location = f"line {line_number}"
        if key:
            location += f", key '{key}'"
        super().__init__(f"{location}: {message}")


class FormatError(MixQuantError):
    """A file does not follow the expected binary or text format"""


class ConsistencyError(MixQuantError):
    """Two related inputs disagree with each other"""


class DivergenceError(NumericError):
    """Training produced a non-finite loss"""

    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")
