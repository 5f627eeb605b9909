"""
Error types for emomine
Three families map to the CLI exit codes: config (2), data (3), numerical (4)
"""


class EmomineError(Exception):
    """Base class for every error raised by the toolchain"""
    exit_code = 1


class ConfigError(EmomineError):
    """Invalid configuration or missing prerequisite"""
    exit_code = 2


class DataError(EmomineError, ValueError):
    """Unreadable or unusable input data"""
    exit_code = 3


class NumericalError(EmomineError, ArithmeticError):
    """Non-finite values during training or inference"""
    exit_code = 4
